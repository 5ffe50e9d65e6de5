//! Acceptance criteria 1 to 9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srmnet::bownet::{
    build_constrained_params, conv_bank, forward_hardmax, hardmax, matching_scores, BowParams, Codebook, ResidualStack,
};
use srmnet::descriptor::{extract_counts, extract_feature, window_counts, BINS, DEFAULT_DELTA, FEATURE_LEN};
use srmnet::experiments::config::ExperimentConfig;
use srmnet::experiments::confusion::run_confusion;
use srmnet::experiments::localize::run_localization;
use srmnet::experiments::suite::{run_binary_suite, Method, SuiteReport};
use srmnet::image::{load_image, Plane};
use srmnet::train::{
    adam_step, backward, cross_entropy, forward_train, soft_feature, AdamState, Gradients, Head, NetParams,
    TrainConfig, TENSORS, TENSOR_NAMES,
};

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

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Smooth ramp plus uniform noise of a seeded amplitude, rounded to 8 bits.
fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> Plane {
    let amp = [0.5, 2.0, 6.0, 20.0, 128.0][rng.random_range(0..5)];
    let (a, b, c) = (
        rng.random_range(40.0..200.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    Plane::from_fn(size, size, |x, y| {
        let v = a + b * x as f64 + c * y as f64 + rng.random_range(-amp..=amp);
        v.round().clamp(0.0, 255.0)
    })
}

/// 16 tiles of the 512x512 test image and 4 of the 256x256 one.
fn natural_patches() -> Vec<Plane> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut out = Vec::new();
    for (file, n) in [("camera.png", 4), ("coffee_green.png", 2)] {
        let img = load_image(data.join(file)).expect("fixture image");
        for ty in 0..n {
            for tx in 0..n {
                out.push(img.crop(tx * 128, ty * 128, 128, 128));
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let params = build_constrained_params(DEFAULT_DELTA).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut patches: Vec<Plane> = (0..100).map(|_| random_patch(&mut rng, 128)).collect();
    patches.extend(natural_patches());
    let mut mismatched = 0;
    for p in &patches {
        let net = forward_hardmax(p, &params).unwrap();
        let counts = extract_counts(p, DEFAULT_DELTA).unwrap();
        if net.0.iter().zip(&counts).any(|(&a, &b)| a != b as f64) {
            mismatched += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        mismatched == 0 && t < Duration::from_secs(30),
        format!(
            "{} patches, {mismatched} mismatched, {} (limit 30s)",
            patches.len(),
            secs(t)
        ),
    )
}

fn brute_force_nearest(r: &[f64], cb: &Codebook) -> (usize, f64) {
    let mut d: Vec<(f64, usize)> = (0..cb.len())
        .map(|k| {
            let dist = cb
                .codeword(k)
                .iter()
                .zip(r)
                .map(|(c, x)| (c - x) * (c - x))
                .sum::<f64>();
            (dist, k)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    (d[0].1, d[1].0 - d[0].0)
}

fn criterion_2() -> Outcome {
    let cb = Codebook::constrained(DEFAULT_DELTA);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut checked, mut resampled, mut mismatches) = (0, 0, 0);
    while checked < 10_000 {
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-12.0..12.0)).collect();
        let (nearest, margin) = brute_force_nearest(&r, &cb);
        if margin < 1e-9 {
            resampled += 1;
            continue;
        }
        let stack = ResidualStack {
            width: 1,
            height: 1,
            channels: r.iter().map(|&v| vec![v]).collect(),
        };
        let scores = matching_scores(&stack, &cb).unwrap();
        if hardmax(&scores).winners[0] != nearest {
            mismatches += 1;
        }
        checked += 1;
    }
    outcome(
        mismatches == 0,
        format!("{checked} vectors, {mismatches} mismatches, {resampled} ties resampled"),
    )
}

fn soft_params(bow: &BowParams, alpha: f64) -> NetParams {
    NetParams::new(bow.clone(), Head::zeros(), alpha).unwrap()
}

/// Smallest gap between the best and second-best matching score over every
/// site of both branches and orientations.
fn min_score_gap(p: &Plane, bow: &BowParams) -> f64 {
    let mut gap = f64::INFINITY;
    for input in [p.clone(), srmnet::image::transpose(p)] {
        for b in [&bow.along, &bow.across] {
            let s = matching_scores(&conv_bank(&input, &b.bank).unwrap(), &b.codebook).unwrap();
            for i in 0..s.sites() {
                let mut v = s.site(i).to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                gap = gap.min(v[0] - v[1]);
            }
        }
    }
    gap
}

fn criterion_3() -> Outcome {
    let bow = build_constrained_params(DEFAULT_DELTA).unwrap();
    let alphas = [16.0, 256.0, 4096.0, 65536.0];
    let patches = natural_patches();
    let mut worst_tied = f64::INFINITY;
    let mut worst_final: f64 = 0.0;
    let mut monotone = true;
    for p in &patches {
        worst_tied = worst_tied.min(min_score_gap(p, &bow));
        let hard = extract_feature(p, true).unwrap();
        let gaps: Vec<f64> = alphas
            .iter()
            .map(|&a| {
                let soft = soft_feature(p, &soft_params(&bow, a)).unwrap();
                soft.iter()
                    .zip(hard.as_slice())
                    .map(|(s, h)| (s - h).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        monotone &= gaps.windows(2).all(|w| w[1] <= w[0]);
        worst_final = worst_final.max(gaps[3]);
    }
    outcome(
        worst_tied > 0.0 && worst_final < 1e-3 && monotone,
        format!(
            "{} patches, smallest score gap {worst_tied:.3}, max-norm gap at 2^16 {worst_final:.3e} (limit 1e-3), nonincreasing {monotone}",
            patches.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let bow = build_constrained_params(DEFAULT_DELTA).unwrap();
    let mut worst = [0.0f64; TENSORS];
    let draws = 20;
    for _ in 0..draws {
        let mut p = NetParams::initial(bow.clone(), rng.random_range(0.005..0.05), rng.random()).unwrap();
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let center: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random_range(-0.1..0.1)).collect();
        let scale: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random_range(0.5..2.0)).collect();
        p.head = p.head.with_standardization(&center, &scale).unwrap();
        let patch = Plane::from_fn(12, 12, |_, _| rng.random_range(0..32) as f64);
        let label = rng.random_range(0..2);

        let (_, cache) = forward_train(&patch, &p).unwrap();
        let g = backward(&cache, label, &p).unwrap();
        let loss = |q: &NetParams| cross_entropy(&forward_train(&patch, q).unwrap().0, label);
        let h = 1e-5;
        for (t, w) in worst.iter_mut().enumerate() {
            for i in 0..p.tensors()[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = g.tensors[t][i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
                *w = w.max(rel);
            }
        }
    }
    let t = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    let (arg, _) = worst
        .iter()
        .enumerate()
        .fold((0, -1.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    outcome(
        max < 1e-4 && t < Duration::from_secs(120),
        format!(
            "{draws} draws, all {TENSORS} tensors, max relative error {max:.2e} ({}) (limit 1e-4), {} (limit 120s)",
            TENSOR_NAMES[arg],
            secs(t)
        ),
    )
}

fn criterion_5() -> Outcome {
    // minimise (b - 3)^2 over one fully connected bias
    let cfg = TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let bow = build_constrained_params(DEFAULT_DELTA).unwrap();
    let mut p = NetParams::new(bow, Head::zeros(), 1.0).unwrap();
    p.head.biases[1] = 0.5;
    let mut state = AdamState::new(&p);

    let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for step in 1..=5 {
        let b = p.head.biases[1];
        let mut g = Gradients::zeros_like(&p);
        g.tensors[TENSORS - 1][1] = 2.0 * (b - 3.0);
        adam_step(&mut p, &g, &mut state, &cfg).unwrap();

        let grad = 2.0 * (theta - 3.0) + 0.01 * theta;
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad * grad;
        let m_hat = m / (1.0 - 0.9f64.powi(step));
        let v_hat = v / (1.0 - 0.999f64.powi(step));
        theta -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        worst = worst.max((p.head.biases[1] - theta).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("5 steps, max deviation {worst:.1e} (limit 1e-12), final {theta:.12}"),
    )
}

fn suite_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.suite.manipulations = ["median:5", "resize:1.5", "blur:0.5", "jpeg:70", "jpeg:90"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cfg
}

fn accuracy(r: &SuiteReport, spec: &str, m: Method) -> f64 {
    100.0 * r.find(spec, m).expect("suite row").eval.accuracy
}

fn criterion_6(report: &SuiteReport, elapsed: Duration) -> Outcome {
    let train = report
        .rows()
        .filter(|r| r.method == Method::Svm)
        .map(|r| r.train_patches)
        .min()
        .unwrap_or(0);
    let acc = |s, m| accuracy(report, s, m);
    let (svm_blur, cnn_blur) = (acc("blur:0.5", Method::Svm), acc("blur:0.5", Method::Cnn));
    let a = cnn_blur >= svm_blur + 2.0;
    let b = ["median:5", "resize:1.5"]
        .iter()
        .all(|s| acc(s, Method::Svm) >= 95.0 && acc(s, Method::Cnn) >= 95.0);
    let c = [Method::Svm, Method::Cnn]
        .iter()
        .all(|&m| acc("jpeg:90", m) < acc("jpeg:70", m));
    let fast = elapsed < Duration::from_secs(30 * 60);
    let mut detail = format!(
        "(a) blur 0.5 cnn {cnn_blur:.2} vs svm {svm_blur:.2} {}; (b) median 5 {:.2}/{:.2}, resize 1.5 {:.2}/{:.2} {}; \
         (c) jpeg 90 {:.2}/{:.2} < jpeg 70 {:.2}/{:.2} {}; {train} training patches; runtime {} (target 1800s)",
        if a { "ok" } else { "FAILED" },
        acc("median:5", Method::Svm),
        acc("median:5", Method::Cnn),
        acc("resize:1.5", Method::Svm),
        acc("resize:1.5", Method::Cnn),
        if b { "ok" } else { "FAILED" },
        acc("jpeg:90", Method::Svm),
        acc("jpeg:90", Method::Cnn),
        acc("jpeg:70", Method::Svm),
        acc("jpeg:70", Method::Cnn),
        if c { "ok" } else { "FAILED" },
        secs(elapsed),
    );
    if !fast {
        detail.push_str(" EXCEEDED");
    }
    outcome(a && b && c && train >= 4000 && fast, detail)
}

fn criterion_7(cfg: &ExperimentConfig, corpus: &srmnet::experiments::corpus::Corpus) -> Outcome {
    let bow = build_constrained_params(DEFAULT_DELTA).unwrap();
    let soft = soft_params(&bow, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut block_ok = true;
    let mut onehot_ok = true;
    let mut nonneg = true;
    for _ in 0..20 {
        let w = rng.random_range(16..80);
        let h = rng.random_range(16..80);
        let p = Plane::from_fn(w, h, |_, _| rng.random_range(0..256) as f64);
        let f = extract_feature(&p, false).unwrap();
        let (along, across) = window_counts(w, h);
        block_ok &= f.along().iter().sum::<f64>() == along as f64 && f.across().iter().sum::<f64>() == across as f64;
        nonneg &= f.0.iter().all(|&v| v >= 0.0);
        nonneg &= soft_feature(&p, &soft).unwrap().iter().all(|&v| v >= 0.0);
        for b in [&bow.along, &bow.across] {
            let oh = hardmax(&matching_scores(&conv_bank(&p, &b.bank).unwrap(), &b.codebook).unwrap());
            onehot_ok &= (0..oh.winners.len()).all(|s| (0..BINS).map(|k| oh.value(s, k)).sum::<f64>() == 1.0);
        }
    }
    let m = run_confusion(cfg, corpus, &mut |_| {}).unwrap();
    let counts_ok = m.counts.iter().all(|r| r.iter().sum::<usize>() > 0);
    let worst_row = m
        .percent()
        .iter()
        .map(|r| (r.iter().sum::<f64>() - 100.0).abs())
        .fold(0.0, f64::max);
    let rows_ok = counts_ok && worst_row <= 1e-9;
    let blur_resize = (m.get("blur", "resize").unwrap() + m.get("resize", "blur").unwrap()) / 2.0;
    let blur_noise = (m.get("blur", "noise").unwrap() + m.get("noise", "blur").unwrap()) / 2.0;
    outcome(
        block_ok && onehot_ok && nonneg && rows_ok,
        format!(
            "block sums {block_ok}, one-hot sums {onehot_ok}, nonnegative {nonneg}, confusion rows off 100 by at most {worst_row:.1e}; \
             blur/resize confusion {blur_resize:.2} vs blur/noise {blur_noise:.2}"
        ),
    )
}

fn criterion_8(cfg: &ExperimentConfig, corpus: &srmnet::experiments::corpus::Corpus, report: &SuiteReport) -> Outcome {
    let entry = report
        .entries
        .iter()
        .find(|e| e.manipulation.to_string() == "blur:0.5")
        .expect("blur entry");
    let mut pass = true;
    let mut detail = Vec::new();
    let cnn = entry.cnn.as_ref().expect("trained network");
    for (name, pred) in [
        ("svm", &entry.svm as &dyn srmnet::experiments::eval::Predictor),
        ("cnn", cnn as &dyn srmnet::experiments::eval::Predictor),
    ] {
        let cases = run_localization(cfg, corpus, pred, &mut |_| {}).unwrap();
        let wins = cases.iter().filter(|c| c.contrast.inside > c.contrast.outside).count();
        pass &= wins == cases.len() && cases.len() == 5;
        let pairs: Vec<String> = cases
            .iter()
            .map(|c| format!("{:.3}>{:.3}", c.contrast.inside, c.contrast.outside))
            .collect();
        detail.push(format!("{name} {wins}/{} [{}]", cases.len(), pairs.join(" ")));
    }
    outcome(pass, detail.join("; "))
}

fn criterion_9() -> Outcome {
    let text = "seed = 9\n\
        [corpus]\ngroups = 3\nimages_per_group = 3\nwidth = 256\nheight = 256\n\
        [suite]\nmanipulations = [\"blur:0.5\", \"jpeg:90\"]\n\
        [cnn]\nmax_train_patches = 24\n[cnn.train]\nepochs = 1\nbatch_size = 8\n";
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let corpus = cfg.corpus().unwrap();
    let first = run_binary_suite(&cfg, &corpus, &mut |_| {}).unwrap().to_tsv();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let second = pool.install(|| {
        let corpus = cfg.corpus().unwrap();
        run_binary_suite(&cfg, &corpus, &mut |_| {}).unwrap().to_tsv()
    });
    let rows = first.lines().count() - 1;
    outcome(
        first == second,
        format!("{rows} rows, {} bytes, identical {}", first.len(), first == second),
    )
}

fn report(n: usize, o: &Outcome, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = 0;
    report(1, &criterion_1(), &mut failures);
    report(2, &criterion_2(), &mut failures);
    report(3, &criterion_3(), &mut failures);
    report(4, &criterion_4(), &mut failures);
    report(5, &criterion_5(), &mut failures);

    let cfg = suite_config();
    let start = Instant::now();
    let corpus = cfg.corpus().unwrap();
    let suite = run_binary_suite(&cfg, &corpus, &mut |m| eprintln!("{m}")).unwrap();
    let elapsed = start.elapsed();
    print!("{}", suite.to_tsv());
    report(6, &criterion_6(&suite, elapsed), &mut failures);
    report(7, &criterion_7(&cfg, &corpus), &mut failures);
    report(8, &criterion_8(&cfg, &corpus, &suite), &mut failures);
    report(9, &criterion_9(), &mut failures);

    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

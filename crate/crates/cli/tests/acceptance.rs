//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::time::Instant;

use demo_cli::{cmd_train, cmd_verify, resolve_config, Overrides};
use demo_core::data::{Config, Mode};
use demo_core::train::synthetic_benchmark;
use demo_core::verify::{self, SuiteOptions, LATENCY_BUDGET};

struct Line {
    id: u32,
    passed: bool,
    detail: String,
}

fn check(id: u32, f: impl FnOnce() -> (bool, String)) -> Line {
    let t = Instant::now();
    let (passed, detail) = f();
    let line = Line {
        id,
        passed,
        detail: format!("{detail} [{:.2} s]", t.elapsed().as_secs_f64()),
    };
    println!(
        "criterion {:>2}: {}  {}",
        line.id,
        if line.passed { "PASS" } else { "FAIL" },
        line.detail
    );
    line
}

fn main() {
    let mut lines = Vec::new();

    lines.push(check(1, || {
        let t = Instant::now();
        let s = verify::dynamics_roundtrip(10_000, 2026).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let ok = s.max_accel_err <= 1e-9 && s.max_yaw_err <= 1e-9 && s.max_vy_err <= 1e-9 && secs < 5.0;
        (
            ok,
            format!(
                "roundtrip over {} pairs: a err {:.1e}, phi err {:.1e}, vy' err {:.1e}",
                s.pairs, s.max_accel_err, s.max_yaw_err, s.max_vy_err
            ),
        )
    }));

    lines.push(check(2, || {
        // by hand: den = 10·1500 + 0.1·2e5 = 35000,
        // num = 0.1·0.1·(−1.2e5 + 1.6e5) + 0.05·10·1e4 − 100·0.1·0.1·1500 = 400 + 5000 − 1500
        let oracle = 3900.0 / 35000.0;
        let vy = verify::golden_lateral_speed().unwrap();
        ((vy - oracle).abs() <= 1e-12, format!("golden vy' {vy:.12} vs {oracle:.12}"))
    }));

    lines.push(check(3, || {
        let e = verify::convergence_errors(&[0.1, 0.05, 0.025]).unwrap();
        let r = [e[0] / e[1], e[1] / e[2]];
        (
            r.iter().all(|x| (1.5..=2.5).contains(x)),
            format!("convergence ratios {:.3}, {:.3} (errors {:.2e}, {:.2e}, {:.2e})", r[0], r[1], e[0], e[1], e[2]),
        )
    }));

    lines.push(check(4, || {
        let t = Instant::now();
        let checks = demo_core::numkernel::gradcheck::layer_suite(10, 1e-6, false).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let worst = checks.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
        let failing: Vec<_> = checks.iter().filter(|c| !c.report.passes(1e-4)).map(|c| c.layer.clone()).collect();
        (
            failing.is_empty() && secs < 60.0,
            format!("gradient checks on {} layers, 10 draws: max rel err {worst:.1e}, failing {failing:?}", checks.len()),
        )
    }));

    lines.push(check(5, || {
        let (golden, min) = verify::kl_checks(1000, 11);
        (
            golden <= 1e-12 && min >= 0.0,
            format!("KL(N(1,1)||N(0,1)) err {golden:.1e}, min KL over 1000 pairs {min:.3e}"),
        )
    }));

    lines.push(check(6, || {
        let mut c = Config::for_mode(Mode::Highway);
        c.seed = 7;
        c.train.epochs = 50;
        c.synth.count = 200;
        c.synth.noise_std = 0.1;
        let t = Instant::now();
        let (_, o) = synthetic_benchmark(&c).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let (i2, i5) = (o.improvement_at(2).unwrap(), o.improvement_at(5).unwrap());
        let first = o.logs.first().map_or(f64::NAN, |l| l.total);
        let last = o.logs.last().map_or(f64::NAN, |l| l.total);
        println!(
            "    model RMSE {:?}\n    const-velocity RMSE {:?}\n    smoothed-velocity RMSE {:?}\n    \
             training loss {first:.3} -> {last:.3} ({:.1}x), split {:?}",
            o.model.rmse_per_second,
            o.const_velocity.rmse_per_second,
            o.smoothed_velocity.rmse_per_second,
            first / last,
            o.split_sizes
        );
        (
            i2 >= 0.20 && i5 >= 0.10 && secs < 900.0,
            format!("closed loop: {:.1}% better at 2 s, {:.1}% better at 5 s, {secs:.0} s", 100.0 * i2, 100.0 * i5),
        )
    }));

    lines.push(check(7, || {
        let r = verify::rmse_fixture().unwrap();
        let m = verify::min_ade_fixture().unwrap();
        let bad = verify::min_ade_monotonicity_violations(1000, 21).unwrap();
        (
            (r - 3.5355).abs() <= 1e-4 && m == 1.0 && bad == 0,
            format!("rmse fixture {r:.6}, minADE fixture {m}, {bad}/1000 monotonicity violations"),
        )
    }));

    lines.push(check(8, || {
        let model = demo_core::model::DemoModel::new(&Config::for_mode(Mode::Highway)).unwrap();
        let p = verify::permutation_equivariance(&model, 100, 17).unwrap();
        let f = verify::frame_equivariance(100, 18).unwrap();
        (p <= 1e-9 && f <= 1e-9, format!("permutation err {p:.1e}, frame err {f:.1e} over 100 scenes each"))
    }));

    lines.push(check(9, || {
        let dir = std::env::temp_dir().join(format!("demo-acceptance-{}", std::process::id()));
        let cfg_path = dir.join("small.cfg");
        fs::create_dir_all(&dir).unwrap();
        fs::write(&cfg_path, "model.d_model = 16\nmodel.z_dim = 4\nsynth.count = 30\ntrain.epochs = 3\n").unwrap();
        let c = resolve_config(Some(&cfg_path), &Overrides::default()).unwrap();
        let runs: Vec<_> = ["a", "b"].iter().map(|r| cmd_train(&c, None, &dir.join(r)).unwrap()).collect();
        let metrics: Vec<Vec<u8>> = runs.iter().map(|m| fs::read(&m.metrics).unwrap()).collect();
        let ckpts: Vec<Vec<u8>> = runs.iter().map(|m| fs::read(&m.checkpoint).unwrap()).collect();
        let _ = fs::remove_dir_all(&dir);
        (
            metrics[0] == metrics[1] && ckpts[0] == ckpts[1] && runs[0].input_hash == runs[1].input_hash,
            format!(
                "two train+evaluate runs: metric reports identical = {}, checkpoints identical = {}",
                metrics[0] == metrics[1],
                ckpts[0] == ckpts[1]
            ),
        )
    }));

    lines.push(check(10, || {
        let (outcomes, matrix, _) = cmd_verify(SuiteOptions::default());
        for l in matrix.lines() {
            println!("    {l}");
        }
        let lat = outcomes.iter().find(|o| o.name == "inference latency").expect("latency check");
        (
            lat.passed,
            format!("single-scene inference via cmd_verify: {} (budget {} ms)", lat.detail, LATENCY_BUDGET.as_millis()),
        )
    }));

    let failed: Vec<u32> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}

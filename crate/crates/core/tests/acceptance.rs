//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 8 to 10 need about 10^12 simulated events at their stated scale
//! (n = 500, m = 10^4). By default they run at n = 64, m = 2000 with the same
//! tolerances; pass `--ignored` (or set `ACCEPTANCE_SCALE=stated`) to run the
//! stated scale. Everything else always runs as stated.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use slowbond::closed_forms::{current_variance, phi, y0_variance};
use slowbond::engine::{simulate, ObserverSet};
use slowbond::generator::{
    bernoulli_product_vector, build_generator, exact_distribution, stationarity_residual, total_variation,
};
use slowbond::lattice::{sample_stationary, Beta, DensityProfile, SlowBondParams};
use slowbond::pde::{phase_transition_curve, solve_neumann, solve_periodic, GridSolution};
use slowbond::rng::stream_seed;
use slowbond::sbeta::{bump, gaussian, make_test_family, Regime};
use slowbond::stats::{
    current_clt_experiment, field_experiment, lln_experiment, lln_test_functions, martingale_check, run_ensemble,
    tagged_clt_experiment, CltSpec, EnsembleOptions, FieldSpec, LlnSpec, MartingaleSpec, Sample,
};

#[derive(Clone, Copy)]
struct Scale {
    n: usize,
    m: usize,
    name: &'static str,
}

const REDUCED: Scale = Scale {
    n: 64,
    m: 2000,
    name: "reduced (n=64, m=2000)",
};

const STATED: Scale = Scale {
    n: 500,
    m: 10_000,
    name: "stated (n=500, m=10^4)",
};

const REGIMES: [(Beta, f64, &str); 3] = [
    (Beta::Finite(0.0), 1.0, "beta=0"),
    (Beta::Finite(1.0), 1.0, "beta=1,alpha=1"),
    (Beta::Infinite, 1.0, "beta=inf"),
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

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    for n in [3, 4, 5] {
        for beta in [Beta::Finite(0.0), Beta::Finite(1.0), Beta::Infinite] {
            for alpha in [0.5, 2.0] {
                let gen = build_generator(&SlowBondParams::new(n, alpha, beta).unwrap()).unwrap();
                for rho in [0.3, 0.5, 0.7] {
                    worst = worst.max(stationarity_residual(&gen, rho).unwrap());
                }
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("stationarity: max residual {worst:.2e} <= 1e-12 over 54 cases"),
    )
}

fn criterion_2() -> Outcome {
    let (n, rho, micro) = (4, 0.3, 1.0);
    let params = SlowBondParams::new(n, 2.0, Beta::Finite(1.0)).unwrap();
    let horizon = micro / (n * n) as f64;
    let ens = run_ensemble(&["state".to_string()], &EnsembleOptions::new(100_000, 2024), |seed| {
        let init = sample_stationary(rho, n, stream_seed(seed, 1))?;
        let traj = simulate(params, init, horizon, seed, &ObserverSet::default(), &[])?;
        Ok(Sample {
            values: vec![traj.final_config.to_index() as f64],
            events: traj.events,
        })
    })
    .unwrap();
    let mut empirical = vec![0.0; 1 << n];
    for s in ens.column(0) {
        empirical[s as usize] += 1e-5;
    }
    let gen = build_generator(&params).unwrap();
    let exact = exact_distribution(&gen, &bernoulli_product_vector(n, rho).unwrap(), micro).unwrap();
    let tv = total_variation(&empirical, &exact);
    outcome(
        tv <= 0.01,
        format!("simulator vs exact law: TV {tv:.4} <= 0.01 (10^5 trajectories)"),
    )
}

fn max_error_at_end(sol: &GridSolution, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let k = sol.steps();
    (0..=sol.m())
        .map(|j| (sol.value(k, j) - exact(sol.time(k), sol.u(j))).abs())
        .fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let t = 0.1;
    let mut ratios = Vec::new();
    let cases: [(&str, f64); 2] = [("periodic", 2.0), ("neumann", 1.0)];
    for (bc, k) in cases {
        let p = DensityProfile::callable(move |u| 0.5 + 0.5 * (k * PI * u).cos()).unwrap();
        let exact = move |s: f64, u: f64| 0.5 + 0.5 * (-k * k * PI * PI * s).exp() * (k * PI * u).cos();
        let errs: Vec<f64> = [128usize, 256, 512]
            .iter()
            .map(|&m| {
                let dt = t / (m / 2) as f64;
                let sol = if bc == "periodic" {
                    solve_periodic(&p, m, t, dt).unwrap()
                } else {
                    solve_neumann(&p, m, t, dt).unwrap()
                };
                max_error_at_end(&sol, exact)
            })
            .collect();
        ratios.push((bc, errs[0] / errs[1], errs[1] / errs[2]));
    }
    let pass = ratios.iter().all(|(_, a, b)| *a >= 3.5 && *b >= 3.5);
    let text: Vec<String> = ratios.iter().map(|(bc, a, b)| format!("{bc} {a:.2}, {b:.2}")).collect();
    outcome(
        pass,
        format!("PDE error ratios under halving (>= 3.5): {}", text.join("; ")),
    )
}

fn criterion_4() -> Outcome {
    let profile = DensityProfile::step(0.8, 0.2).unwrap();
    let tests = lln_test_functions();
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (beta, alpha, label)) in REGIMES.iter().enumerate() {
        let spec = LlnSpec {
            alpha: *alpha,
            beta: *beta,
            t: 0.1,
            n_list: vec![200, 400],
            grid_m: 512,
            grid_steps: 1024,
        };
        let rep = lln_experiment(
            &spec,
            &profile,
            &tests,
            &EnsembleOptions::new(50, 4000 + 1000 * i as u64),
        )
        .unwrap();
        // The n-trend is judged on the average over the test functions; single
        // pairs at m = 50 are within Monte Carlo noise of each other.
        let (mut sum200, mut sum400) = (0.0, 0.0);
        for h in &tests {
            let (e200, e400) = (rep.error(200, &h.name).unwrap(), rep.error(400, &h.name).unwrap());
            pass &= e400 <= 0.05;
            sum200 += e200;
            sum400 += e400;
            parts.push(format!("{label}/{}: {e400:.4} (n=200: {e200:.4})", h.name));
        }
        let k = tests.len() as f64;
        pass &= sum400 <= sum200;
        parts.push(format!("{label} average {:.4} vs {:.4}", sum400 / k, sum200 / k));
    }
    outcome(
        pass,
        format!(
            "L.L.N. mean pairing error at n=400 <= 0.05, average <= n=200: {}",
            parts.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let alphas: Vec<f64> = (-3..=3).map(|k| 10f64.powi(k)).collect();
    let step = DensityProfile::step(1.0, 0.0).unwrap();
    let curve = phase_transition_curve(&step, &alphas, 512, 0.5, 0.5 / 1024.0).unwrap();
    let first = &curve.rows[0];
    let last = curve.rows.last().unwrap();
    let up = curve.rows.windows(2).all(|w| w[0].dist_neumann <= w[1].dist_neumann);
    let down = curve.rows.windows(2).all(|w| w[0].dist_periodic >= w[1].dist_periodic);
    let pass = last.dist_periodic <= 0.02 && first.dist_neumann <= 0.02 && up && down;
    outcome(
        pass,
        format!(
            "phase transition: dist_periodic(1e3) {:.2e}, dist_neumann(1e-3) {:.2e} (<= 0.02), monotone {}",
            last.dist_periodic,
            first.dist_neumann,
            up && down
        ),
    )
}

/// Composite Simpson rule, used as an oracle independent of the library's
/// adaptive quadrature.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    for t in [0.1, 1.0, 10.0] {
        for x in -5..=5 {
            let x = x as f64;
            let density = |v: f64| (-v * v / (4.0 * t)).exp() / (4.0 * PI * t).sqrt();
            let upper = x.max(0.0) + 40.0 * t.sqrt();
            let oracle = simpson(density, x, upper, 200_000);
            worst = worst.max((phi(t, x).unwrap() - oracle).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("Phi against direct quadrature: max error {worst:.2e} <= 1e-10"),
    )
}

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for u in [0.0, 0.3] {
        let (rho, t) = (0.4, 0.5);
        let big = current_variance(Regime::critical(1e4).unwrap(), rho, u, t).unwrap();
        let small = current_variance(Regime::critical(1e-4).unwrap(), rho, u, t).unwrap();
        let sub = current_variance(Regime::Sub, rho, u, t).unwrap();
        let sup = current_variance(Regime::Super, rho, u, t).unwrap();
        worst = worst.max((big - sub).abs()).max((small - sup).abs());
    }
    outcome(
        worst <= 1e-3,
        format!("critical formula limits alpha -> 0, inf: max gap {worst:.2e} <= 1e-3"),
    )
}

fn clt_spec(beta: Beta, alpha: f64, n: usize, rel_tol: Option<f64>) -> CltSpec {
    CltSpec {
        params: SlowBondParams::new(n, alpha, beta).unwrap(),
        rho: 0.5,
        us: vec![0.0, 0.2],
        times: vec![0.5],
        guard: 4.0,
        rel_tol,
    }
}

fn criterion_8(scale: Scale) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (beta, alpha, label)) in REGIMES.iter().enumerate() {
        let spec = clt_spec(*beta, *alpha, scale.n, Some(0.1));
        let rep =
            current_clt_experiment(&spec, &EnsembleOptions::new(scale.m, 8_000_000 + 100_000 * i as u64)).unwrap();
        for r in &rep.rows {
            let u = r.u.unwrap();
            let ok = if beta.is_infinite() && u == 0.0 {
                r.variance == 0.0
            } else {
                r.z_variance.abs() <= 3.0 && r.rel_error <= 0.1
            };
            pass &= ok;
            parts.push(format!(
                "{label} u={u}: {:.4} vs {:.4} (z {:.2}, rel {:.3}){}",
                r.variance,
                r.theory,
                r.z_variance,
                r.rel_error,
                if ok { "" } else { " FAIL" }
            ));
        }
    }
    outcome(pass, format!("current C.L.T. [{}]: {}", scale.name, parts.join(", ")))
}

fn criterion_9(scale: Scale) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut violations = 0;
    for (i, (beta, alpha, label)) in REGIMES.iter().enumerate() {
        let spec = clt_spec(*beta, *alpha, scale.n, None);
        let rep = tagged_clt_experiment(&spec, &EnsembleOptions::new(scale.m, 9_000_000 + 100_000 * i as u64)).unwrap();
        violations += rep.identity_violations;
        for r in &rep.rows {
            let ok = r.z_variance.abs() <= 3.0;
            pass &= ok;
            parts.push(format!(
                "{label} u={}: {:.4} vs {:.4} (z {:.2}){}",
                r.u.unwrap(),
                r.variance,
                r.theory,
                r.z_variance,
                if ok { "" } else { " FAIL" }
            ));
        }
    }
    pass &= violations == 0;
    outcome(
        pass,
        format!(
            "tagged C.L.T. [{}]: {}; order identity k=1..10 failed on {violations} trajectories",
            scale.name,
            parts.join(", ")
        ),
    )
}

fn criterion_10(scale: Scale) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    // Time-zero field: no dynamics, so always at the stated scale.
    let tests = vec![
        gaussian(),
        bump("bump", 0.5, 0.4),
        make_test_family(Regime::critical(1.0).unwrap()).unwrap()[2].clone(),
    ];
    let spec = FieldSpec {
        params: SlowBondParams::new(STATED.n, 1.0, Beta::Finite(1.0)).unwrap(),
        rho: 0.5,
        times: vec![0.0],
        window: 8.0,
        rel_tol: Some(0.1),
    };
    let rep = field_experiment(&spec, &tests, &EnsembleOptions::new(STATED.m, 10_000_000)).unwrap();
    for (r, h) in rep.rows.iter().zip(&tests) {
        let theory = y0_variance(h, 0.5).unwrap();
        let ok = r.rel_error <= 0.1 && (r.theory - theory).abs() < 1e-12;
        pass &= ok;
        parts.push(format!(
            "Var Y0({}) {:.4} vs {:.4} (rel {:.3})",
            r.observable, r.variance, r.theory, r.rel_error
        ));
    }
    for (i, (beta, alpha, label)) in REGIMES.iter().enumerate() {
        let params = SlowBondParams::new(scale.n, *alpha, *beta).unwrap();
        let h = make_test_family(Regime::of(&params)).unwrap()[2].clone();
        let spec = MartingaleSpec {
            params,
            rho: 0.5,
            t: 0.25,
            snapshots_per_unit: 64,
            window: 8.0,
            rel_tol: Some(0.15),
        };
        let rep = martingale_check(
            &spec,
            &h,
            &EnsembleOptions::new(scale.m, 10_100_000 + 100_000 * i as u64),
        )
        .unwrap();
        let r = &rep.row;
        let ok = r.z_mean.abs() <= 3.0 && r.rel_error <= 0.15;
        pass &= ok;
        parts.push(format!(
            "{label} martingale {}: mean z {:.2}, Var {:.4} vs {:.4} (rel {:.3})",
            r.observable, r.z_mean, r.variance, r.theory, r.rel_error
        ));
    }
    outcome(
        pass,
        format!("fluctuation field [{}]: {}", scale.name, parts.join(", ")),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_slowbond"))
        .args(args)
        .output()
        .expect("run slowbond")
        .status
        .code()
        .unwrap_or(-1)
}

fn same_csvs(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    !names.is_empty()
        && names
            .iter()
            .all(|n| std::fs::read(a.join(n)).ok() == std::fs::read(b.join(n)).ok())
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs: [(&str, &[&str]); 8] = [
        (
            "simulate",
            &[
                "--n",
                "40",
                "--sites",
                "120",
                "--beta",
                "1",
                "--t",
                "0.2",
                "--u",
                "0,0.25",
                "--tagged-u",
                "0.5",
                "--seed",
                "11",
            ],
        ),
        (
            "oracle-check",
            &[
                "--n", "4", "--beta", "1", "--alpha", "2", "--rho", "0.3", "--seed", "12", "--m", "5000",
            ],
        ),
        ("lln", &["--beta", "0", "--n-list", "40,80", "--m", "8", "--seed", "13"]),
        (
            "field",
            &[
                "--n", "30", "--beta", "1", "--times", "0,0.05", "--m", "60", "--seed", "14",
            ],
        ),
        (
            "martingale",
            &["--n", "20", "--beta", "inf", "--m", "40", "--seed", "15"],
        ),
        (
            "current-clt",
            &["--n", "20", "--beta", "1", "--m", "60", "--seed", "16"],
        ),
        ("tagged-clt", &["--n", "20", "--beta", "0", "--m", "60", "--seed", "17"]),
        ("phase-transition", &["--grid-m", "64", "--dt", "0.01"]),
    ];
    let mut bad = Vec::new();
    for (cmd, args) in runs {
        let first = tmp.path().join(format!("{cmd}-1"));
        let again = tmp.path().join(format!("{cmd}-2"));
        let mut argv = vec![cmd, "--workers", "1", "--out", first.to_str().unwrap()];
        if cmd == "simulate" || cmd == "phase-transition" {
            argv.drain(1..3);
        }
        argv.extend_from_slice(args);
        let code = run_cli(&argv);
        let manifest = first.join("manifest.json");
        let replay = run_cli(&[
            "replay",
            manifest.to_str().unwrap(),
            "--workers",
            "4",
            "--out",
            again.to_str().unwrap(),
        ]);
        if code == 2 || replay != code || !same_csvs(&first, &again) {
            bad.push(format!("{cmd} (exit {code}/{replay})"));
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "manifest replay on 4 workers reproduces the 1-worker CSVs byte for byte for 8 commands{}",
            if bad.is_empty() {
                String::new()
            } else {
                format!("; mismatched: {}", bad.join(", "))
            }
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        // `cargo test -- --list` support: nothing to enumerate individually.
        return;
    }
    let stated = args.iter().any(|a| a == "--ignored" || a == "--include-ignored")
        || std::env::var("ACCEPTANCE_SCALE").is_ok_and(|v| v == "stated");
    let scale = if stated { STATED } else { REDUCED };
    let filter: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let criteria: Vec<(usize, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(criterion_2)),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(criterion_5)),
        (6, Box::new(criterion_6)),
        (7, Box::new(criterion_7)),
        (8, Box::new(move || criterion_8(scale))),
        (9, Box::new(move || criterion_9(scale))),
        (10, Box::new(move || criterion_10(scale))),
        (11, Box::new(criterion_11)),
    ];
    let mut failed = Vec::new();
    for (id, run) in &criteria {
        if filter.is_some_and(|f| f != *id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "criterion {id:>2}: {} {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

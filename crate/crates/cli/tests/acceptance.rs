//! Acceptance suite: one `criterion N: PASS|FAIL` line per criterion.
//!
//! Criteria 5, 6, 9 and 10 drive the `decsc` binary end to end; the rest call
//! the library against oracles written here.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use decsc::config::ExperimentConfig;
use decsc::io::load_cube;
use decsc::layers::{ModelConfig, ModelParams};
use decsc::metrics::{psnr_whole, sam, ssim};
use decsc::noise::{add_noniid_gaussian, corr_sigma_profile, impulse_band, CORR_BETA, CORR_ETA};
use decsc::phantom::neumann_report;
use decsc::solver::{solve, SolverConfig, SolverMethod};
use decsc::tensor::corr::{self, CorrGeom};
use decsc::tensor::{
    conv2d_shared, conv2d_shared_adjoint, conv2d_shared_weight_grad, conv3d, conv3d_adjoint, conv3d_weight_grad,
    inner_product, BandDictionary2D, Dictionary3D, Flat, HsiCube, SparseCodeH, SparseCodeS,
};
use decsc_cli::grad_check_models;

type Outcome = Result<String, String>;

/// Solver used for the convergence trace of the trained toy model.
const TRACE_METHOD: &str = "anderson";
/// Optimizer steps per ablation cell.
const ABLATION_STEPS: usize = 200;

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    // `DECSC_ACCEPTANCE=1,2,7` runs a subset; 5 reads the checkpoint from 6.
    let only: Option<Vec<usize>> = std::env::var("DECSC_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut report = |n: usize, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let t = Instant::now();
        let mut out = f();
        let dt = t.elapsed();
        if let (Ok(msg), Some(l)) = (&out, limit) {
            if dt > l {
                out = Err(format!("{msg}; runtime {dt:.1?} over {l:?}"));
            }
        }
        match out {
            Ok(msg) => println!("criterion {n}: PASS {msg} [{dt:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL {msg} [{dt:.1?}]");
            }
        }
    };
    let secs = Duration::from_secs;
    let runs = [work.path().join("run_a"), work.path().join("run_b")];
    report(1, Some(secs(10)), &mut adjoint_identities);
    report(2, Some(secs(30)), &mut kernel_oracle);
    report(3, Some(secs(300)), &mut || phantom_gradient(&runs[0]));
    report(4, Some(secs(5)), &mut || solver_counts(&runs[0]));
    report(6, Some(secs(900)), &mut || end_to_end(&runs[0]));
    report(5, None, &mut || convergence(&runs[0]));
    report(7, None, &mut noise_generators);
    report(8, None, &mut metric_units);
    report(9, None, &mut || ablation(&work.path().join("ablation")));
    report(10, None, &mut || determinism(&runs));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn decsc(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_decsc"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("decsc {}: {}", args.first().unwrap_or(&""), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------- 1

fn adjoint_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let (h, w, b) = (rng.gen_range(1..=9), rng.gen_range(1..=9), rng.gen_range(1..=6));
        let m = rng.gen_range(1..=4);
        let k = 2 * rng.gen_range(0..=3) + 1;
        let kd = BandDictionary2D::from_vec(m, b, k, uniform(&mut rng, b * m * k * k)).map_err(err)?;
        let sc = SparseCodeS::from_vec(m, h, w, uniform(&mut rng, m * h * w)).map_err(err)?;
        let r = HsiCube::from_vec(h, w, b, uniform(&mut rng, h * w * b)).map_err(err)?;
        let lhs = inner_product(conv2d_shared(&kd, &sc).map_err(err)?.data(), r.data()).map_err(err)?;
        let rhs = inner_product(sc.data(), conv2d_shared_adjoint(&kd, &r).map_err(err)?.data()).map_err(err)?;
        let wg = inner_product(kd.data(), conv2d_shared_weight_grad(&kd, &sc, &r).map_err(err)?.data()).map_err(err)?;
        worst[0] = worst[0].max(rel(lhs, rhs));
        worst[1] = worst[1].max(rel(lhs, wg));

        let j = rng.gen_range(1..=3);
        let kb = 2 * rng.gen_range(0..=1) + 1;
        let d = Dictionary3D::from_vec(j, k, kb, uniform(&mut rng, j * kb * k * k)).map_err(err)?;
        let hc = SparseCodeH::from_vec(j, h, w, b, uniform(&mut rng, j * b * h * w)).map_err(err)?;
        let lhs = inner_product(conv3d(&d, &hc).map_err(err)?.data(), r.data()).map_err(err)?;
        let rhs = inner_product(hc.data(), conv3d_adjoint(&d, &r).map_err(err)?.data()).map_err(err)?;
        let wg = inner_product(d.data(), conv3d_weight_grad(&d, &hc, &r).map_err(err)?.data()).map_err(err)?;
        worst[2] = worst[2].max(rel(lhs, rhs));
        worst[3] = worst[3].max(rel(lhs, wg));

        let g = CorrGeom {
            cin: j,
            cout: rng.gen_range(1..=3),
            depth: b,
            height: h,
            width: w,
            kd: 3,
            kh: 3,
            kw: 3,
        };
        let wt = uniform(&mut rng, g.weight_len());
        let x = uniform(&mut rng, g.input_len());
        let y = uniform(&mut rng, g.output_len());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let lhs = dot(&corr::forward(&g, &wt, &x), &y);
        worst[4] = worst[4].max(rel(lhs, dot(&x, &corr::adjoint(&g, &wt, &y))).max(rel(lhs, dot(&wt, &corr::weight_grad(&g, &x, &y)))));
        let lhs = dot(&corr::central_diff_forward(&g, &wt, &x), &y);
        worst[5] = worst[5].max(
            rel(lhs, dot(&x, &corr::central_diff_adjoint(&g, &wt, &y)))
                .max(rel(lhs, dot(&wt, &corr::central_diff_weight_grad(&g, &x, &y)))),
        );
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let msg = format!(
        "max relative gap: K {:.1e}/{:.1e}, D {:.1e}/{:.1e}, dconv {:.1e}, central {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
    );
    if max <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 2

/// Textbook zero-padded "same" cross-correlation by direct summation.
fn brute_corr(g: &CorrGeom, w: &[f64], x: &[f64], central: bool) -> Vec<f64> {
    let (pd, ph, pw) = ((g.kd / 2) as isize, (g.kh / 2) as isize, (g.kw / 2) as isize);
    let xi = |i: usize, z: isize, r: isize, c: isize| -> Option<f64> {
        if z < 0 || r < 0 || c < 0 || z >= g.depth as isize || r >= g.height as isize || c >= g.width as isize {
            return None;
        }
        Some(x[((i * g.depth + z as usize) * g.height + r as usize) * g.width + c as usize])
    };
    let mut y = vec![0.0; g.output_len()];
    for o in 0..g.cout {
        for z in 0..g.depth {
            for r in 0..g.height {
                for c in 0..g.width {
                    let mut acc = 0.0;
                    for i in 0..g.cin {
                        let centre = xi(i, z as isize, r as isize, c as isize).unwrap();
                        for a in 0..g.kd {
                            for b in 0..g.kh {
                                for e in 0..g.kw {
                                    let tap = w[(((o * g.cin + i) * g.kd + a) * g.kh + b) * g.kw + e];
                                    let zz = z as isize + a as isize - pd;
                                    let rr = r as isize + b as isize - ph;
                                    let cc = c as isize + e as isize - pw;
                                    if let Some(v) = xi(i, zz, rr, cc) {
                                        acc += tap * if central { v - centre } else { v };
                                    }
                                }
                            }
                        }
                    }
                    y[((o * g.depth + z) * g.height + r) * g.width + c] = acc;
                }
            }
        }
    }
    y
}

/// Adjoint and weight gradient of `brute_corr` by probing with unit vectors.
fn brute_linear_maps(g: &CorrGeom, w: &[f64], x: &[f64], ybar: &[f64], central: bool) -> (Vec<f64>, Vec<f64>) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut xbar = vec![0.0; x.len()];
    let mut e = vec![0.0; x.len()];
    for i in 0..x.len() {
        e[i] = 1.0;
        xbar[i] = dot(&brute_corr(g, w, &e, central), ybar);
        e[i] = 0.0;
    }
    let mut wbar = vec![0.0; w.len()];
    let mut e = vec![0.0; w.len()];
    for i in 0..w.len() {
        e[i] = 1.0;
        wbar[i] = dot(&brute_corr(g, &e, x, central), ybar);
        e[i] = 0.0;
    }
    (xbar, wbar)
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut shapes = 0usize;
    for h in 1..=7 {
        for w in 1..=7 {
            for b in 1..=5 {
                for m in 1..=3 {
                    // Shared 2-D dictionary: every band from the same M code maps.
                    for k in [1usize, 3, 5, 7] {
                        let kd = BandDictionary2D::from_vec(m, b, k, uniform(&mut rng, b * m * k * k)).map_err(err)?;
                        let sc = SparseCodeS::from_vec(m, h, w, uniform(&mut rng, m * h * w)).map_err(err)?;
                        let fast = conv2d_shared(&kd, &sc).map_err(err)?;
                        let g = CorrGeom { cin: m, cout: b, depth: 1, height: h, width: w, kd: 1, kh: k, kw: k };
                        worst = worst.max(max_abs_gap(fast.data(), &brute_corr(&g, kd.data(), sc.data(), false)));
                        shapes += 1;
                    }
                    // 3-D dictionary over J channels.
                    for (k, kb) in [(1usize, 1usize), (3, 1), (3, 3), (5, 3)] {
                        let d = Dictionary3D::from_vec(m, k, kb, uniform(&mut rng, m * kb * k * k)).map_err(err)?;
                        let hc = SparseCodeH::from_vec(m, h, w, b, uniform(&mut rng, m * b * h * w)).map_err(err)?;
                        let fast = conv3d(&d, &hc).map_err(err)?;
                        let g = CorrGeom { cin: m, cout: 1, depth: b, height: h, width: w, kd: kb, kh: k, kw: k };
                        worst = worst.max(max_abs_gap(fast.data(), &brute_corr(&g, d.data(), hc.data(), false)));
                        shapes += 1;
                    }
                    // J -> J 3x3x3 detail convolutions, plain and central difference, with adjoints.
                    let g = CorrGeom { cin: m, cout: m, depth: b, height: h, width: w, kd: 3, kh: 3, kw: 3 };
                    let wt = uniform(&mut rng, g.weight_len());
                    let x = uniform(&mut rng, g.input_len());
                    let ybar = uniform(&mut rng, g.output_len());
                    for central in [false, true] {
                        let (fwd, adj, wgr) = if central {
                            (
                                corr::central_diff_forward(&g, &wt, &x),
                                corr::central_diff_adjoint(&g, &wt, &ybar),
                                corr::central_diff_weight_grad(&g, &x, &ybar),
                            )
                        } else {
                            (corr::forward(&g, &wt, &x), corr::adjoint(&g, &wt, &ybar), corr::weight_grad(&g, &x, &ybar))
                        };
                        worst = worst.max(max_abs_gap(&fwd, &brute_corr(&g, &wt, &x, central)));
                        if h * w * b <= 40 {
                            let (xb, wb) = brute_linear_maps(&g, &wt, &x, &ybar, central);
                            worst = worst.max(max_abs_gap(&adj, &xb)).max(max_abs_gap(&wgr, &wb));
                        }
                        shapes += 1;
                    }
                }
            }
        }
    }
    let msg = format!("{shapes} shapes, max |fast - direct| {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 3

fn default_tiny(seed: u64) -> Result<(ModelParams, HsiCube), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::tiny(3, 4, 2);
    cfg.prior_init_std = 0.05;
    cfg.prior_zero_out = true;
    let p = ModelParams::init(&cfg, &mut rng).map_err(err)?;
    let y = HsiCube::from_vec(4, 4, 3, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).map_err(err)?;
    Ok((p, y))
}

fn phantom_gradient(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(err)?;
    let cfg = ExperimentConfig::grad_check_default();
    let rows = grad_check_models(&cfg, 10).map_err(|e| e.message)?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let compared: usize = rows.iter().map(|r| r.compared).sum();
    let empty: Vec<&str> = rows.iter().filter(|r| r.compared == 0).map(|r| r.block.as_str()).collect();
    decsc(&["grad-check", "--models", "10", "--out-csv", s(&dir.join("gradcheck.csv"))])?;

    let mut gap = 0.0f64;
    for seed in 0..10 {
        let (p, y) = default_tiny(seed)?;
        let mut c = y.clone();
        c.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37 + seed as f64).sin());
        gap = gap.max(neumann_report(&p, &y, &c, 5).map_err(err)?.gap);
    }
    let msg = format!(
        "10 models, {} blocks, {compared} entries: max rel {worst:.2e}; Neumann gap {gap:.1e}",
        rows.len()
    );
    if worst <= 1e-3 && gap <= 1e-6 && empty.is_empty() {
        Ok(msg)
    } else if !empty.is_empty() {
        Err(format!("{msg}; blocks with no entry above the floor: {empty:?}"))
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 4

type Map = Box<dyn Fn(&[f64]) -> Vec<f64>>;

fn solver_counts(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(err)?;
    let (c, sn) = (0.9 * 0.3f64.cos(), 0.9 * 0.3f64.sin());
    let maps: Vec<(&str, Map, Vec<f64>)> = vec![
        ("affine scalar", Box::new(|x: &[f64]| vec![0.5 * x[0] + 1.0]), vec![0.0]),
        (
            "2d contraction",
            Box::new(move |x: &[f64]| vec![c * x[0] - sn * x[1] + 1.0, sn * x[0] + c * x[1] - 1.0]),
            vec![0.0, 0.0],
        ),
    ];
    let mut csv = String::from("map,method,memory,iterations,final_residual\n");
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, f, x0) in &maps {
        let run = |method, memory| {
            let cfg = SolverConfig {
                method,
                memory,
                beta: 1.0,
                tol: 1e-6,
                max_iter: 500,
                ..SolverConfig::default()
            };
            solve(|a: &[f64]| Ok(f(a)), x0, &cfg, None).map_err(err)
        };
        let (xn, tn) = run(SolverMethod::Naive, 5)?;
        let (_, ta) = run(SolverMethod::Anderson, 5)?;
        let (x1, t1) = run(SolverMethod::Anderson, 1)?;
        for (m, mem, t) in [("naive", 0, &tn), ("anderson", 5, &ta), ("anderson", 1, &t1)] {
            csv.push_str(&format!("{name},{m},{mem},{},{:e}\n", t.iterations(), t.final_residual().unwrap_or(f64::NAN)));
        }
        let bitwise = xn.iter().zip(&x1).all(|(a, b)| a.to_bits() == b.to_bits())
            && tn.residuals.iter().zip(&t1.residuals).all(|(a, b)| a.to_bits() == b.to_bits())
            && tn.iterations() == t1.iterations();
        ok &= tn.converged && ta.converged && ta.iterations() <= tn.iterations() && bitwise;
        notes.push(format!(
            "{name}: anderson {} vs naive {}, m=1 bitwise {}",
            ta.iterations(),
            tn.iterations(),
            if bitwise { "yes" } else { "no" }
        ));
    }
    fs::write(dir.join("solver.csv"), csv).map_err(err)?;
    if ok {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

// ---------------------------------------------------------------- 6

fn csv_column(text: &str, column: &str) -> Result<Vec<String>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    let idx = header.iter().position(|h| *h == column).ok_or(format!("no column {column}"))?;
    Ok(lines.map(|l| l.split(',').nth(idx).unwrap_or("").to_string()).collect())
}

fn eval_psnr(pred: &Path, reference: &Path, out: &Path) -> Result<f64, String> {
    decsc(&["eval", "--pred", s(pred), "--ref", s(reference), "--out-csv", s(out)])?;
    let text = fs::read_to_string(out).map_err(err)?;
    csv_column(&text, "psnr")?[0].parse::<f64>().map_err(err)
}

fn test_cube(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("test_noisy/cube_{i:04}.hsic")), dir.join(format!("test_clean/cube_{i:04}.hsic")))
}

fn end_to_end(dir: &Path) -> Outcome {
    fs::create_dir_all(dir.join("test_noisy")).map_err(err)?;
    let (train, test) = (dir.join("train_clean"), dir.join("test_clean"));
    decsc(&["make-synthetic", "--out-dir", s(&train), "--count", "8", "--h", "32", "--w", "32", "--b", "8", "--seed", "0"])?;
    decsc(&["make-synthetic", "--out-dir", s(&test), "--count", "4", "--h", "32", "--w", "32", "--b", "8", "--seed", "1"])?;
    let cfg = dir.join("toy.cfg");
    fs::write(&cfg, "# desk-scale toy run\nnoise.pattern = noniid\nnoise.lo = 0\nnoise.hi = 55\nnoise.seed = 100\ntrain.max_steps = 200\n")
        .map_err(err)?;
    let ck = dir.join("toy.dqck");
    decsc(&["train", "--data-dir", s(&train), "--config", s(&cfg), "--out-checkpoint", s(&ck)])?;
    let log = fs::read_to_string(dir.join("toy.dqck.log.csv")).map_err(err)?;
    let steps = log.lines().count() - 1;

    let (mut noisy, mut den) = (0.0, 0.0);
    for i in 0..4 {
        let (y, x) = test_cube(dir, i);
        let seed = (200 + i).to_string();
        decsc(&["add-noise", "--in", s(&x), "--out", s(&y), "--pattern", "noniid", "--lo", "0", "--hi", "55", "--seed", &seed])?;
        let xhat = dir.join(format!("denoised_{i}.hsic"));
        decsc(&["denoise", "--in", s(&y), "--checkpoint", s(&ck), "--out", s(&xhat), "--config", s(&cfg)])?;
        noisy += eval_psnr(&y, &x, &dir.join(format!("eval_noisy_{i}.csv")))? / 4.0;
        den += eval_psnr(&xhat, &x, &dir.join(format!("eval_denoised_{i}.csv")))? / 4.0;
    }
    let msg = format!("{steps} steps: noisy {noisy:.2} dB -> denoised {den:.2} dB (gain {:.2})", den - noisy);
    if steps <= 200 && den - noisy >= 3.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 5

fn convergence(dir: &Path) -> Outcome {
    let ck = dir.join("toy.dqck");
    if !ck.exists() {
        return Err("needs the criterion 6 checkpoint".into());
    }
    let mut mean = vec![0.0; 30];
    let mut per_cube = Vec::new();
    for i in 0..4 {
        let (y, x) = test_cube(dir, i);
        let out = dir.join(format!("trace_{i}.csv"));
        decsc(&[
            "solve-trace", "--in", s(&y), "--checkpoint", s(&ck), "--reference", s(&x), "--method", TRACE_METHOD,
            "--max-iter", "30", "--tol", "1e-300", "--out-csv", s(&out),
        ])?;
        let text = fs::read_to_string(&out).map_err(err)?;
        let psnr: Vec<f64> = csv_column(&text, "psnr_if_reference_given")?
            .iter()
            .map(|v| v.parse::<f64>().map_err(err))
            .collect::<Result<_, _>>()?;
        if psnr.len() != 30 {
            return Err(format!("cube {i}: trace has {} iterations", psnr.len()));
        }
        mean.iter_mut().zip(&psnr).for_each(|(m, v)| *m += v / 4.0);
        per_cube.push(psnr);
    }
    let judge = |p: &[f64]| {
        let drops = p[5..].windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        let tail = &p[25..];
        let spread = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max) - tail.iter().copied().fold(f64::INFINITY, f64::min);
        (drops, spread)
    };
    let (drop, spread) = judge(&mean);
    let cubes: Vec<String> = per_cube
        .iter()
        .map(|p| {
            let (d, s) = judge(p);
            format!("{d:.3}/{s:.3}")
        })
        .collect();
    let msg = format!(
        "{TRACE_METHOD}, mean PSNR {:.2} -> {:.2} dB; largest drop after it 5 {drop:.4} dB, last-5 spread {spread:.4} dB (per cube drop/spread {})",
        mean[5],
        mean[29],
        cubes.join(" ")
    );
    if drop <= 0.0 && spread < 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 7

fn noise_generators() -> Outcome {
    let x = HsiCube::from_vec(128, 128, 6, vec![0.5; 128 * 128 * 6]).map_err(err)?;
    let (y, sigmas) = add_noniid_gaussian(&x, 0.0, 30.0, 7).map_err(err)?;
    let mut worst_std = 0.0f64;
    for (b, &sg) in sigmas.iter().enumerate() {
        let d: Vec<f64> = y.band(b).iter().zip(x.band(b)).map(|(u, v)| u - v).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        worst_std = worst_std.max(rel(sd, sg / 255.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_imp = 0.0f64;
    for r in [0.1, 0.25, 0.4, 0.55, 0.7] {
        let mut band = vec![0.5; 128 * 128];
        impulse_band(&mut band, r, &mut rng);
        let hit = band.iter().filter(|v| **v == 0.0 || **v == 1.0).count() as f64 / band.len() as f64;
        worst_imp = worst_imp.max((hit - r).abs());
    }
    let bands = 31;
    let prof = corr_sigma_profile(bands, CORR_BETA, CORR_ETA);
    let peak_exact = corr_sigma_profile(2, CORR_BETA, CORR_ETA)[1] == CORR_BETA;
    let sigma0 = prof[0];
    let msg = format!(
        "std rel err {worst_std:.3}, impulse |frac - r| {worst_imp:.4}, peak = beta {peak_exact}, sigma0 {sigma0:.4}"
    );
    if worst_std <= 0.05 && worst_imp <= 0.02 && peak_exact && (sigma0 - 1.83).abs() <= 1e-2 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 8

fn metric_units() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = HsiCube::from_vec(16, 16, 4, (0..1024).map(|_| rng.gen_range(0.0..0.9)).collect()).map_err(err)?;
    let mut off = x.clone();
    off.data_mut().iter_mut().for_each(|v| *v += 0.1);
    let p = psnr_whole(&off, &x).map_err(err)?;
    let sv = ssim(&x, &x).map_err(err)?;
    let a = HsiCube::from_vec(1, 1, 2, vec![1.0, 0.0]).map_err(err)?;
    let b = HsiCube::from_vec(1, 1, 2, vec![0.0, 1.0]).map_err(err)?;
    let angle = sam(&a, &b).map_err(err)?.radians;
    let msg = format!("psnr {p:.12}, ssim {sv}, sam {angle:.15}");
    if (p - 20.0).abs() <= 1e-9 && sv == 1.0 && (angle - FRAC_PI_2).abs() <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 9

fn ablation(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(err)?;
    let out = dir.join("ablation.csv");
    let steps = ABLATION_STEPS.to_string();
    decsc(&["ablation", "--out-csv", s(&out), "--atoms", "32,64", "--unroll", "1,3,5", "--steps", &steps])?;
    let text = fs::read_to_string(&out).map_err(err)?;
    let atoms = csv_column(&text, "atoms2d")?;
    let unroll = csv_column(&text, "unroll")?;
    let psnr = csv_column(&text, "denoised_psnr")?;
    let get = |m: &str, l: &str| -> Option<f64> {
        (0..atoms.len()).find(|&i| atoms[i] == m && unroll[i] == l).and_then(|i| psnr[i].parse().ok())
    };
    let mut notes = Vec::new();
    let mut ok = atoms.len() == 6;
    for m in ["32", "64"] {
        let (l1, l3, l5) = (get(m, "1"), get(m, "3"), get(m, "5"));
        match (l1, l3, l5) {
            (Some(a), Some(b), Some(c)) => {
                ok &= c >= a;
                notes.push(format!("M={m}: L1 {a:.2}, L3 {b:.2}, L5 {c:.2}"));
            }
            _ => {
                ok = false;
                notes.push(format!("M={m}: missing rows"));
            }
        }
    }
    if ok {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

// ---------------------------------------------------------------- 10

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, String> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    Ok(v)
}

fn determinism(runs: &[PathBuf; 2]) -> Outcome {
    let b = &runs[1];
    // Verdicts belong to the criteria themselves; only the outputs are compared here.
    let verdicts = [phantom_gradient(b), solver_counts(b), end_to_end(b), convergence(b)];
    let failed_stages = verdicts.iter().filter(|v| v.is_err()).count();
    let (fa, fb) = (csv_files(&runs[0])?, csv_files(b)?);
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(format!("csv sets differ: {} vs {}", fa.len(), fb.len()));
    }
    let mut differing = Vec::new();
    for (x, y) in fa.iter().zip(&fb) {
        if fs::read(x).map_err(err)? != fs::read(y).map_err(err)? {
            differing.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let ck_same = fs::read(runs[0].join("toy.dqck")).map_err(err)? == fs::read(b.join("toy.dqck")).map_err(err)?;
    for i in 0..4 {
        let name = format!("denoised_{i}.hsic");
        if load_cube(&runs[0].join(&name)).map_err(err)? != load_cube(&b.join(&name)).map_err(err)? {
            differing.push(name);
        }
    }
    let msg = format!(
        "{} csv files compared, checkpoint identical {ck_same} ({failed_stages} of 4 rerun verdicts red)",
        fa.len()
    );
    if differing.is_empty() && ck_same {
        Ok(msg)
    } else {
        Err(format!("{msg}; differing: {differing:?}"))
    }
}

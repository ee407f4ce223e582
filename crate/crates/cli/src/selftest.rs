//! Fast end-to-end checks run by `tlab selftest`.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use tlab_core::deep_linear::{end_to_end_beta, init_balanced, min_norm_solution, run_gradient_flow, FlowConfig};
use tlab_core::relu_mf::{arccos_kernel_u, population_loss_relu, random_student, train_relu, ReluFlowConfig, ReluObjective};
use tlab_core::rng::{gaussian_matrix, mix64, rng_from};
use tlab_core::task_gen::{
    dudley_lower_bound, empirical_w1, far_apart_dudley, far_apart_kl, kl_between, make_task_pair, sample_dataset,
};
use tlab_core::theory::{classify, finetune_transferability, linear_transfer_ge, ridge_transfer_ge, scratch_ge, Label, Method};
use tlab_core::transfer_linear::{linear_transfer, linear_transfer_closed_form, pretrain_defaults, pretrain_source};
use tlab_core::{DVector, FunctionInSpan, InitMode, Objective};

use crate::commands::with_pool;
use crate::config::ExperimentConfig;
use crate::output::results_csv;
use crate::runner::{execute, Previous};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn closed_forms() -> Result<String, String> {
    let s = scratch_ge(0.5, 0.2).to_f64();
    ensure((s - 0.54).abs() <= 1e-12, || format!("scratch ge {s}"))?;
    let t = linear_transfer_ge(PI / 3.0, 0.2, 100.0);
    ensure((t - (0.75 + 0.79 / 98.0)).abs() <= 1e-12, || format!("transfer ge {t}"))?;
    let f = finetune_transferability(0.5, PI / 3.0);
    ensure(f.abs() <= 1e-12, || format!("fine-tune T at the boundary {f}"))?;
    let label = classify(0.97, PI / 2.0, 0.2, Method::Linear).label;
    ensure(label == Label::Positive, || format!("orthogonal tasks near the pole: {label}"))?;
    let r = ridge_transfer_ge(0.4, 1.0) - ridge_transfer_ge(0.4, 0.0);
    ensure(r > 0.0, || "ridge error must grow with lambda".into())?;
    Ok("closed forms".into())
}

fn kernel_values() -> Result<String, String> {
    let vals = [arccos_kernel_u(1.0), arccos_kernel_u(0.0), arccos_kernel_u(-1.0)];
    let want = [0.5, 1.0 / (2.0 * PI), 0.0];
    for (v, w) in vals.iter().zip(want) {
        ensure((v - w).abs() <= 1e-15, || format!("k = {v}, expected {w}"))?;
    }
    Ok(format!("{vals:?}"))
}

fn implicit_bias() -> Result<String, String> {
    let (d, n) = (20, 10);
    let pair = make_task_pair(d, 0.5, 3).map_err(|e| e.to_string())?;
    let data = sample_dataset(&pair.beta_tgt, n, 0.1, 4).map_err(|e| e.to_string())?;
    let net = init_balanced(2, d, 1e-4, 1.0, InitMode::Gaussian, 5).map_err(|e| e.to_string())?;
    let cfg = FlowConfig {
        eta: 2e-3,
        max_steps: 1_000_000,
        loss_tol: 1e-12,
    };
    let out = run_gradient_flow(&net, Objective::Empirical(&data), &cfg).map_err(|e| e.to_string())?;
    let oracle = min_norm_solution(&data.x, &data.y).map_err(|e| e.to_string())?;
    let gap = (end_to_end_beta(&out.net) - &oracle).norm();
    ensure(gap <= 1e-2, || format!("flow vs pseudoinverse {gap}"))?;
    ensure(out.max_balance_drift <= 1e-4, || format!("balance drift {}", out.max_balance_drift))?;
    Ok(format!("gap {gap:.2e}, drift {:.2e}", out.max_balance_drift))
}

fn transfer_closed_form() -> Result<String, String> {
    let pair = make_task_pair(30, 0.9, 6).map_err(|e| e.to_string())?;
    let pre = pretrain_source(&pair.beta_src, 2, 1e-5, InitMode::Gaussian, &pretrain_defaults(), 7)
        .map_err(|e| e.to_string())?;
    let data = sample_dataset(&pair.beta_tgt, 15, 0.2, 8).map_err(|e| e.to_string())?;
    let out = linear_transfer(&pre.net, &pair, &data, 0.0).map_err(|e| e.to_string())?;
    let gap = (&out.beta_hat - linear_transfer_closed_form(&pair.beta_src, &data)).norm();
    ensure(gap <= 1e-8, || format!("linear transfer vs b * beta_s {gap}"))?;
    Ok(format!("gap {gap:.2e}"))
}

fn w1_metric() -> Result<String, String> {
    let mut rng = rng_from(9);
    let a = gaussian_matrix(&mut rng, 40, 3);
    let b = gaussian_matrix(&mut rng, 40, 3);
    let ab = empirical_w1(&a, &b).map_err(|e| e.to_string())?;
    let rev: Vec<usize> = (0..40).rev().collect();
    let permuted = empirical_w1(&a.select_rows(rev.iter()), &b).map_err(|e| e.to_string())?;
    ensure((ab - permuted).abs() <= 1e-12, || format!("{ab} vs {permuted}"))?;
    let self_dist = empirical_w1(&a, &a).map_err(|e| e.to_string())?;
    ensure(self_dist.abs() <= 1e-12, || format!("self distance {self_dist}"))?;
    Ok(format!("w1 {ab:.4}"))
}

fn far_apart() -> Result<String, String> {
    let mut s = 10u64;
    let mut next = || {
        s = mix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..20 {
        let delta = 0.01 + 20.0 * next();
        let sigma = 0.05 + 2.0 * next();
        let f = FunctionInSpan::new(DVector::from_fn(4, |_, _| 2.0 * next() - 1.0));
        let g = far_apart_dudley(&f, delta, sigma).map_err(|e| e.to_string())?;
        let h = far_apart_kl(&f, delta, sigma).map_err(|e| e.to_string())?;
        ensure(dudley_lower_bound(&f, &g, sigma) >= delta * (1.0 - 1e-12), || "dudley bound".into())?;
        ensure(kl_between(&f, &h, sigma) >= delta * (1.0 - 1e-12), || "kl bound".into())?;
    }
    Ok("20 draws".into())
}

fn relu_descent() -> Result<String, String> {
    let teacher = random_student(5, 4, 11).map_err(|e| e.to_string())?;
    let teacher = teacher
        .with_outputs(DVector::from_fn(5, |i, _| 1.0 + i as f64))
        .map_err(|e| e.to_string())?;
    let student = random_student(30, 4, 12).map_err(|e| e.to_string())?;
    let cfg = ReluFlowConfig {
        lr_per_width: 0.5,
        max_steps: 1000,
        loss_tol: 0.0,
    };
    let before = population_loss_relu(&student, &teacher).map_err(|e| e.to_string())?;
    let out = train_relu(&student, ReluObjective::Population(&teacher), &cfg).map_err(|e| e.to_string())?;
    ensure(out.final_loss < 1e-3 * before, || format!("loss {before} -> {}", out.final_loss))?;
    ensure(out.net.sphere_deviation() <= 1e-10, || "rows left the sphere".into())?;
    Ok(format!("loss {before:.3e} -> {:.3e}", out.final_loss))
}

const SWEEP: &str = r#"
name = "selftest"
kind = "ridge_sweep"
[model]
d = 24
[grid]
gamma = [0.5, 1.5]
theta = [0.4, 1.2]
sigma = [0.2]
lambda = [0.0, 0.5]
[seeds]
count = 4
base = 99
"#;

fn sweep_determinism() -> Result<String, String> {
    let cfg = ExperimentConfig::parse(SWEEP, Path::new("selftest.toml"), false).map_err(|e| e.to_string())?;
    let one = with_pool(Some(1), || execute(&cfg, &Previous::default())).map_err(|e| e.to_string())?;
    let three = with_pool(Some(3), || execute(&cfg, &Previous::default())).map_err(|e| e.to_string())?;
    let a = results_csv(&one.rows).map_err(|e| e.to_string())?;
    let b = results_csv(&three.rows).map_err(|e| e.to_string())?;
    ensure(a == b, || "results differ between 1 and 3 workers".into())?;
    let resumed = execute(&cfg, &Previous::new(one.rows[..5].to_vec()));
    let c = results_csv(&resumed.rows).map_err(|e| e.to_string())?;
    ensure(a == c, || "resumed results differ".into())?;
    Ok(format!("{} rows, {} bytes", one.rows.len(), a.len()))
}

pub const CHECKS: [(&str, Check); 8] = [
    ("closed_forms", closed_forms),
    ("arccos_kernel", kernel_values),
    ("implicit_bias", implicit_bias),
    ("linear_transfer_closed_form", transfer_closed_form),
    ("w1_metric", w1_metric),
    ("far_apart_bounds", far_apart),
    ("relu_population_descent", relu_descent),
    ("sweep_determinism", sweep_determinism),
];

/// Runs every check, printing one line each. Returns the number of failures.
pub fn run() -> usize {
    let mut failures = 0;
    for (name, check) in CHECKS {
        let start = Instant::now();
        let outcome = check();
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("selftest {name:<28} ok    {ms:>6} ms  {detail}"),
            Err(msg) => {
                failures += 1;
                println!("selftest {name:<28} FAIL  {ms:>6} ms  {msg}");
            }
        }
    }
    failures
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for (name, check) in super::CHECKS {
            assert!(check().is_ok(), "{name}: {:?}", check());
        }
    }
}

use ffgo_core::lora::{self, GradCheck, GradInstance};
use ffgo_core::Exec;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::{Ctx, LoraCmd};

#[derive(Serialize)]
struct GradSuite {
    instances: usize,
    tol: f64,
    max_rel_error: f64,
    worst: Option<GradInstance>,
    passed: bool,
}

pub fn run(ctx: &Ctx, cmd: LoraCmd) -> Result<()> {
    let exec = Exec::default();
    match cmd {
        LoraCmd::Init {
            d,
            k,
            r,
            alpha,
            seed,
            out,
        } => {
            let ad = lora::init_adapter(d, k, r, alpha, ctx.config.seed(seed))?;
            super::ensure_parent(&out)?;
            lora::save_adapter(&ad, &out)?;
            ctx.report(
                &serde_json::json!({"d": d, "k": k, "r": r, "alpha": alpha, "out": out}),
                &format!("adapter {d}x{k} rank {r} -> {}", out.display()),
            )
        }
        LoraCmd::Merge { weight, adapter, out } => apply(ctx, &weight, &adapter, &out, false, exec),
        LoraCmd::Unmerge { weight, adapter, out } => apply(ctx, &weight, &adapter, &out, true, exec),
        LoraCmd::CheckGrad {
            instances,
            max_dim,
            step,
            tol,
            seed,
        } => {
            if instances == 0 || tol.is_nan() || tol <= 0.0 || step.is_nan() || step <= 0.0 {
                return Err(CliError::validation("instances, step and tol must be positive"));
            }
            let base = ctx.config.seed(seed);
            let draws: Vec<GradInstance> = (0..instances as u64)
                .map(|i| GradInstance::draw(base.wrapping_add(i), max_dim))
                .collect();
            // Instances fan out; each check runs sequentially inside.
            let results = exec.map(&draws, |g| g.run(step, Exec::Sequential));
            let mut worst: Option<(GradInstance, GradCheck)> = None;
            for (g, r) in draws.iter().zip(results) {
                let r = r?;
                if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
                    worst = Some((*g, r));
                }
            }
            let max_rel_error = worst.as_ref().map_or(0.0, |(_, w)| w.max_rel_error);
            let suite = GradSuite {
                instances,
                tol,
                max_rel_error,
                worst: worst.map(|(g, _)| g),
                passed: max_rel_error <= tol,
            };
            ctx.report(
                &suite,
                &format!(
                    "{instances} instances, max relative error {max_rel_error:.3e} (tol {tol:e}): {}",
                    if suite.passed { "ok" } else { "FAILED" }
                ),
            )?;
            if suite.passed {
                Ok(())
            } else {
                Err(CliError::validation("gradient check exceeded tolerance"))
            }
        }
        LoraCmd::Savings { d, k, r } => {
            if r == 0 || r > d.min(k) {
                return Err(CliError::validation(format!("rank {r} outside [1, min({d}, {k})]")));
            }
            let s = lora::param_savings(d, k, r);
            ctx.report(
                &s,
                &format!(
                    "lora_params {}\nfull_params {}\nratio {}",
                    s.lora_params, s.full_params, s.ratio
                ),
            )
        }
    }
}

fn apply(
    ctx: &Ctx,
    weight: &std::path::Path,
    adapter: &std::path::Path,
    out: &std::path::Path,
    unmerge: bool,
    exec: Exec,
) -> Result<()> {
    let w = lora::load_weight(weight)?;
    let ad = lora::load_adapter(adapter)?;
    let result = if unmerge {
        lora::unmerge(&w, &ad, exec)?
    } else {
        lora::merge(&w, &ad, exec)?
    };
    super::ensure_parent(out)?;
    lora::save_weight(&result, out)?;
    let (d, k) = result.shape();
    ctx.report(
        &serde_json::json!({"d": d, "k": k, "out": out}),
        &format!("{} {d}x{k} -> {}", if unmerge { "unmerged" } else { "merged" }, out.display()),
    )
}

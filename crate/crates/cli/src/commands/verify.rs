//! Run the verification oracles against a model and print a pass/fail
//! table. Exit is clean only if every check that ran passed.

use std::path::Path;

use pyrpix_core::network::{Conditioning, Model};
use pyrpix_core::oracle::{
    causality_probe, enumerate_mass, gradcheck_linear, gradcheck_masked_stack, gradcheck_upscaler,
    EnumSpec,
};
use pyrpix_core::{Error, Result};

use crate::commands::load_run;
use crate::config;

pub struct VerifyOutcome {
    pub passed: bool,
    pub table: String,
}

enum Row {
    Pass(String, String),
    Fail(String, String),
    Skip(String, String),
}

impl Row {
    fn render(&self) -> String {
        match self {
            Row::Pass(n, d) => format!("{n:<28} PASS  {d}"),
            Row::Fail(n, d) => format!("{n:<28} FAIL  {d}"),
            Row::Skip(n, d) => format!("{n:<28} SKIP  {d}"),
        }
    }
}

/// Causality probing is O(N^2) forward passes; keep it to small dims.
const PROBE_SITE_BOUND: usize = 256;
/// Finite differences over every upscaler weight; keep it to small models.
const GRADCHECK_PARAM_BOUND: usize = 6000;

pub fn cmd_verify(
    config_path: &Path,
    checkpoint: Option<&Path>,
    seed: u64,
    inject_mask_fault: bool,
) -> Result<VerifyOutcome> {
    let cfg = config::parse(&std::fs::read_to_string(config_path)?)?;
    let model = match checkpoint {
        Some(path) => {
            let run = load_run(path)?;
            run.model
        }
        None => cfg.build_model(seed)?,
    };
    let Model::Multiscale(mut model) = model else {
        return Err(Error::Config("verify wants a multiscale model".into()));
    };
    if inject_mask_fault {
        let what = model.inject_mask_fault();
        eprintln!("injected fault: {what}");
    }

    let mut rows = Vec::new();
    let cond = Conditioning::none();

    // Normalization oracle.
    let spec = EnumSpec::of_model(&model.cfg);
    match spec.image_count() {
        Err(_) => rows.push(Row::Skip(
            "normalization".into(),
            "image space exceeds 2^16".into(),
        )),
        Ok(count) => {
            let report = enumerate_mass(&Model::Multiscale(model.clone()), &spec, &cond)?;
            let err = (report.total - 1.0).abs();
            let detail = format!("total={:.9} over {count} images", report.total);
            if err < 1e-6 {
                rows.push(Row::Pass("normalization".into(), detail));
            } else {
                rows.push(Row::Fail("normalization".into(), detail));
            }
        }
    }

    // Causality probe, both methods.
    let sites = model.cfg.channels() * model.cfg.target_h * model.cfg.target_w;
    if sites <= PROBE_SITE_BOUND {
        let report = causality_probe(&model, &cond, seed ^ 0xCA05, 2)?;
        let detail = if report.passed() {
            "0 violations".to_string()
        } else {
            format!(
                "{} violations, first: {}",
                report.violations.len(),
                report.violations[0]
            )
        };
        if report.passed() {
            rows.push(Row::Pass("causality".into(), detail));
        } else {
            rows.push(Row::Fail("causality".into(), detail));
        }
    } else {
        rows.push(Row::Skip(
            "causality".into(),
            format!("{sites} sites exceed probe bound {PROBE_SITE_BOUND}"),
        ));
    }

    // Gradient checks.
    let lin = gradcheck_linear(seed)?;
    rows.push(if lin.max_rel_error < 1e-9 {
        Row::Pass(
            "gradcheck(linear)".into(),
            format!("max_rel={:.2e}", lin.max_rel_error),
        )
    } else {
        Row::Fail(
            "gradcheck(linear)".into(),
            format!("max_rel={:.2e}", lin.max_rel_error),
        )
    });
    let stack = gradcheck_masked_stack(seed)?;
    rows.push(if stack.max_rel_error < 1e-6 {
        Row::Pass(
            "gradcheck(masked_stack)".into(),
            format!("max_rel={:.2e}", stack.max_rel_error),
        )
    } else {
        Row::Fail(
            "gradcheck(masked_stack)".into(),
            format!("max_rel={:.2e}", stack.max_rel_error),
        )
    });
    let up_params: usize = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("up"))
        .map(|(_, t)| t.len())
        .sum();
    if up_params <= GRADCHECK_PARAM_BOUND {
        let up = gradcheck_upscaler(&model, seed.wrapping_add(1))?;
        rows.push(if up.max_rel_error < 1e-4 {
            Row::Pass(
                "gradcheck(upscaler)".into(),
                format!("max_rel={:.2e}", up.max_rel_error),
            )
        } else {
            Row::Fail(
                "gradcheck(upscaler)".into(),
                format!("max_rel={:.2e}", up.max_rel_error),
            )
        });
    } else {
        rows.push(Row::Skip(
            "gradcheck(upscaler)".into(),
            format!("{up_params} upscaler weights exceed bound {GRADCHECK_PARAM_BOUND}"),
        ));
    }

    let passed = !rows.iter().any(|r| matches!(r, Row::Fail(..)));
    let mut table = String::new();
    for r in &rows {
        table.push_str(&r.render());
        table.push('\n');
    }
    table.push_str(&format!(
        "{:<28} {}\n",
        "overall",
        if passed { "PASS" } else { "FAIL" }
    ));
    Ok(VerifyOutcome { passed, table })
}

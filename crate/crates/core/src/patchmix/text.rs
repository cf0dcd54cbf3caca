//! Line-oriented plan dump used for golden files.
//!
//! ```text
//! patchmix-plan 1
//! N 3
//! M 2
//! T 4
//! perm 2 0 3 1
//! inverse 1 3 0 2
//! group_bounds 0 2 4
//! q 0 3 2 5 4 1
//! source_map 0 1 0 1      (one line per mixed image)
//! y_mto 0 1               (one line per mixed image)
//! y_mtm 2 0 1             (one line per mixed image)
//! w_mtm 0.5 1 0.5         (one line per mixed image)
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use super::{MixConfig, MixPlan};
use crate::error::{Error, Result};
use crate::patch_ops::Permutation;

const HEADER: &str = "patchmix-plan 1";

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_plan(plan: &MixPlan) -> String {
    let cfg = plan.cfg;
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "N {}", cfg.batch);
    let _ = writeln!(s, "M {}", cfg.mix);
    let _ = writeln!(s, "T {}", cfg.tokens);
    let _ = writeln!(s, "perm {}", join(plan.perm.forward()));
    let _ = writeln!(s, "inverse {}", join(plan.perm.inverse()));
    let _ = writeln!(s, "group_bounds {}", join(&plan.group_bounds));
    let _ = writeln!(s, "q {}", join(&plan.q));
    for row in plan.source_map.chunks(cfg.tokens) {
        let _ = writeln!(s, "source_map {}", join(row));
    }
    for row in &plan.y_mto {
        let _ = writeln!(s, "y_mto {}", join(row));
    }
    for row in &plan.y_mtm {
        let _ = writeln!(s, "y_mtm {}", join(row));
    }
    for row in &plan.w_mtm {
        let _ = writeln!(s, "w_mtm {}", join(row));
    }
    s
}

fn parse_row<T: FromStr>(line_no: usize, fields: &str) -> Result<Vec<T>> {
    fields
        .split_whitespace()
        .map(|f| {
            f.parse()
                .map_err(|_| Error::invalid(format!("plan line {line_no}: bad value {f:?}")))
        })
        .collect()
}

pub fn parse_plan(text: &str) -> Result<MixPlan> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(Error::invalid(format!("plan dump must start with {HEADER:?}"))),
    }
    let (mut n, mut m, mut t) = (None, None, None);
    let mut perm = None;
    let mut bounds = Vec::new();
    let mut q = Vec::new();
    let mut source_map = Vec::new();
    let (mut y_mto, mut y_mtm, mut w_mtm) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, line) in lines {
        let line_no = idx + 1;
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let scalar = |rest: &str| -> Result<usize> {
            rest.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("plan line {line_no}: bad integer {rest:?}")))
        };
        match key {
            "N" => n = Some(scalar(rest)?),
            "M" => m = Some(scalar(rest)?),
            "T" => t = Some(scalar(rest)?),
            "perm" => perm = Some(Permutation::from_forward(parse_row(line_no, rest)?)?),
            "inverse" => {}
            "group_bounds" => bounds = parse_row(line_no, rest)?,
            "q" => q = parse_row(line_no, rest)?,
            "source_map" => source_map.extend(parse_row::<usize>(line_no, rest)?),
            "y_mto" => y_mto.push(parse_row(line_no, rest)?),
            "y_mtm" => y_mtm.push(parse_row(line_no, rest)?),
            "w_mtm" => w_mtm.push(parse_row(line_no, rest)?),
            other => {
                return Err(Error::invalid(format!("plan line {line_no}: unknown key {other:?}")))
            }
        }
    }
    let missing = |what: &str| Error::invalid(format!("plan dump is missing {what}"));
    let cfg = MixConfig::new(
        n.ok_or_else(|| missing("N"))?,
        m.ok_or_else(|| missing("M"))?,
        t.ok_or_else(|| missing("T"))?,
    )?;
    Ok(MixPlan {
        cfg,
        perm: perm.ok_or_else(|| missing("perm"))?,
        group_bounds: bounds,
        q,
        source_map,
        y_mto,
        y_mtm,
        w_mtm,
    })
}

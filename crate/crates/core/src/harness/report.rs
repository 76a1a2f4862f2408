//! Aggregates several runs' `summary.csv` files into a Markdown table of the
//! total Chamfer distance: one row per (variant, λ), one column per iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub iter: u64,
    pub lambda: f64,
    pub variant: String,
    pub group: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Parse(format!("{}: summary rows need 7 columns", path.display())));
        }
        let p = |i: usize| rec[i].parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{}`", &rec[i])));
        rows.push(SummaryRow {
            iter: rec[0].parse().map_err(|_| Error::Parse(format!("bad iteration `{}`", &rec[0])))?,
            lambda: p(1)?,
            variant: rec[2].to_string(),
            group: rec[3].to_string(),
            mean: p(4)?,
            std: p(5)?,
            n_seeds: rec[6].parse().map_err(|_| Error::Parse(format!("bad seed count `{}`", &rec[6])))?,
        });
    }
    Ok(rows)
}

fn label(variant: &str, lambda: f64) -> String {
    match variant {
        "srdp" => format!("SRDP(λ={lambda})"),
        "bc_diffusion" => "BC-Diffusion".to_string(),
        other => other.to_string(),
    }
}

/// Markdown table of `mean ± std` totals. Iteration 0 is omitted.
pub fn table(rows: &[SummaryRow]) -> String {
    let totals: Vec<&SummaryRow> = rows.iter().filter(|r| r.group == "total" && r.iter > 0).collect();
    let iters: BTreeSet<u64> = totals.iter().map(|r| r.iter).collect();
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, u64), String> = BTreeMap::new();
    for r in &totals {
        let l = label(&r.variant, r.lambda);
        if !order.contains(&l) {
            order.push(l.clone());
        }
        cells.insert((l, r.iter), format!("{:.2} ± {:.2}", r.mean, r.std));
    }
    let mut s = String::from("| Method |");
    for i in &iters {
        s.push_str(&format!(" {i} |"));
    }
    s.push_str("\n|---|");
    for _ in &iters {
        s.push_str("---|");
    }
    s.push('\n');
    for l in &order {
        s.push_str(&format!("| {l} |"));
        for i in &iters {
            let c = cells.get(&(l.clone(), *i)).map_or("", String::as_str);
            s.push_str(&format!(" {c} |"));
        }
        s.push('\n');
    }
    s
}

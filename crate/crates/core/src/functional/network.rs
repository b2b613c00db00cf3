//! Variable elimination over site-indexed factor graphs.

use crate::error::{Error, Result};
use crate::C64;

/// Dense factor over up to three site variables (row-major, first var slowest).
#[derive(Clone, Debug)]
pub(crate) struct Factor {
    pub vars: Vec<usize>,
    pub data: Vec<C64>,
}

const MAX_RANK: usize = 3;

/// Contracts all variables except `keep`.
///
/// Returns a vector of length `n` when `keep` is set, otherwise a length-one
/// vector holding the scalar.
pub(crate) fn contract(n: usize, nvars: usize, mut factors: Vec<Factor>, keep: Option<usize>) -> Result<Vec<C64>> {
    let mut alive: Vec<bool> = vec![true; nvars];
    loop {
        // pick the cheapest variable to eliminate
        let mut best: Option<(usize, usize)> = None;
        for v in 0..nvars {
            if !alive[v] || Some(v) == keep {
                continue;
            }
            let mut nb: Vec<usize> = Vec::new();
            for f in &factors {
                if f.vars.contains(&v) {
                    for &w in &f.vars {
                        if w != v && !nb.contains(&w) {
                            nb.push(w);
                        }
                    }
                }
            }
            if best.map_or(true, |(_, s)| nb.len() < s) {
                best = Some((v, nb.len()));
            }
        }
        let Some((v, _)) = best else { break };
        alive[v] = false;
        let (touch, rest): (Vec<Factor>, Vec<Factor>) = factors.into_iter().partition(|f| f.vars.contains(&v));
        factors = rest;
        if touch.is_empty() {
            // an isolated variable with no factors sums the constant 1
            factors.push(Factor { vars: vec![], data: vec![C64::new(n as f64, 0.0)] });
            continue;
        }
        let mut out_vars: Vec<usize> = Vec::new();
        for f in &touch {
            for &w in &f.vars {
                if w != v && !out_vars.contains(&w) {
                    out_vars.push(w);
                }
            }
        }
        if out_vars.len() >= MAX_RANK {
            return Err(Error::Unsupported(format!(
                "contraction graph too dense (intermediate rank {})",
                out_vars.len()
            )));
        }
        factors.push(eliminate(n, v, &out_vars, &touch));
    }
    // multiply whatever is left
    let len = if keep.is_some() { n } else { 1 };
    let mut out = vec![C64::new(1.0, 0.0); len];
    for f in factors {
        match f.vars.len() {
            0 => {
                for o in out.iter_mut() {
                    *o *= f.data[0];
                }
            }
            1 => {
                for (o, d) in out.iter_mut().zip(&f.data) {
                    *o *= d;
                }
            }
            _ => unreachable!("only the kept variable can survive"),
        }
    }
    Ok(out)
}

fn strides(rank: usize, n: usize) -> Vec<usize> {
    (0..rank).map(|i| n.pow((rank - 1 - i) as u32)).collect()
}

fn eliminate(n: usize, v: usize, out_vars: &[usize], touch: &[Factor]) -> Factor {
    let r = out_vars.len();
    let out_len = n.pow(r as u32);
    // for each factor: stride of v and strides of the output variables
    let plan: Vec<(usize, Vec<(usize, usize)>)> = touch
        .iter()
        .map(|f| {
            let st = strides(f.vars.len(), n);
            let mut sv = 0;
            let mut others = Vec::new();
            for (i, &w) in f.vars.iter().enumerate() {
                if w == v {
                    sv = st[i];
                } else {
                    let pos = out_vars.iter().position(|&u| u == w).unwrap();
                    others.push((pos, st[i]));
                }
            }
            (sv, others)
        })
        .collect();
    let mut data = vec![C64::new(0.0, 0.0); out_len];
    let mut coord = vec![0usize; r];
    let mut scratch = vec![C64::new(0.0, 0.0); n];
    for (oi, slot) in data.iter_mut().enumerate() {
        let mut rem = oi;
        for i in (0..r).rev() {
            coord[i] = rem % n;
            rem /= n;
        }
        for s in scratch.iter_mut() {
            *s = C64::new(1.0, 0.0);
        }
        for (f, (sv, others)) in touch.iter().zip(&plan) {
            let base: usize = others.iter().map(|&(pos, st)| coord[pos] * st).sum();
            for (x, s) in scratch.iter_mut().enumerate() {
                *s *= f.data[base + x * sv];
            }
        }
        *slot = scratch.iter().sum();
    }
    Factor { vars: out_vars.to_vec(), data }
}

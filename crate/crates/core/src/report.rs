//! State-size tables comparing the expansions.

use serde::Serialize;

use crate::error::Result;
use crate::expansions::{expansion_dim, ExpansionSpec};

/// One row of the dimension table for a given `(d, p)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimRow {
    pub d: usize,
    pub p: u32,
    pub d_tile: Option<usize>,
    pub tpow: u64,
    pub spow: u64,
    pub tspow: Option<u64>,
    /// `100 * (1 - spow / tpow)`, unrounded.
    pub spow_savings_pct: f64,
    pub tspow_savings_pct: Option<f64>,
    /// The SPOW saving as printed in tables, see [`format_savings`].
    pub spow_savings: String,
}

/// `100 * (1 - small / big)`.
pub fn savings_pct(small: u64, big: u64) -> f64 {
    if big == 0 {
        return 0.0;
    }
    100.0 * (big - small.min(big)) as f64 / big as f64
}

/// Savings are truncated, never rounded up: a whole percent, or one decimal
/// once less than half a percent remains (`82.54 -> "82%"`, `99.83 -> "99.8%"`).
pub fn format_savings(pct: f64) -> String {
    if 100.0 - pct < 0.5 {
        format!("{}%", (pct * 10.0).floor() / 10.0)
    } else {
        format!("{}%", pct.floor())
    }
}

pub fn dim_row(d: usize, p: u32, d_tile: Option<usize>) -> Result<DimRow> {
    let tpow = expansion_dim(&ExpansionSpec::tpow(p, d))?;
    let spow = expansion_dim(&ExpansionSpec::spow(p, d))?;
    let tspow = d_tile.map(|t| expansion_dim(&ExpansionSpec::tspow(p, d, t))).transpose()?;
    let spow_savings_pct = savings_pct(spow, tpow);
    Ok(DimRow {
        d,
        p,
        d_tile,
        tpow,
        spow,
        tspow,
        spow_savings_pct,
        tspow_savings_pct: tspow.map(|x| savings_pct(x, tpow)),
        spow_savings: format_savings(spow_savings_pct),
    })
}

/// Rows for every `(d, p)` pair, `d` outermost.
pub fn dim_table(ds: &[usize], ps: &[u32], d_tile: Option<usize>) -> Result<Vec<DimRow>> {
    let mut rows = Vec::with_capacity(ds.len() * ps.len());
    for &d in ds {
        for &p in ps {
            rows.push(dim_row(d, p, d_tile)?);
        }
    }
    Ok(rows)
}

//! TTL assignment files: CSV `object_id,cache_id,ttl_rate,ttl_mean`.
//!
//! A rate of `inf` (mean 0) means never cache; a rate of 0 (mean `inf`)
//! means never expire.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{INFINITE_TTL_RATE, NEVER_CACHE_RATE};
use crate::objective::TtlConfig;

pub const HEADER: [&str; 4] = ["object_id", "cache_id", "ttl_rate", "ttl_mean"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtlRow {
    pub object_id: String,
    pub cache_id: usize,
    pub ttl_rate: f64,
    pub ttl_mean: f64,
}

fn row_for(object_id: String, cache_id: usize, x: f64) -> TtlRow {
    let (ttl_rate, ttl_mean) = if x >= NEVER_CACHE_RATE {
        (f64::INFINITY, 0.0)
    } else if x <= INFINITE_TTL_RATE {
        (0.0, f64::INFINITY)
    } else {
        (x, 1.0 / x)
    };
    TtlRow {
        object_id,
        cache_id,
        ttl_rate,
        ttl_mean,
    }
}

/// Rows for `x`, plus never-cache rows for `cold` objects.
pub fn rows(x: &TtlConfig, labels: &[String], cold: &[String]) -> Vec<TtlRow> {
    let mut out = Vec::with_capacity((labels.len() + cold.len()) * x.n_caches());
    for (i, id) in labels.iter().enumerate() {
        for k in 0..x.n_caches() {
            out.push(row_for(id.clone(), k, x.get(i, k)));
        }
    }
    for id in cold {
        for k in 0..x.n_caches() {
            out.push(row_for(id.clone(), k, f64::INFINITY));
        }
    }
    out
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:e}")
    }
}

pub fn write<W: Write>(rows: &[TtlRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Config(e.to_string());
    wr.write_record(HEADER).map_err(io)?;
    for r in rows {
        wr.write_record([r.object_id.clone(), r.cache_id.to_string(), fmt(r.ttl_rate), fmt(r.ttl_mean)])
            .map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<Vec<TtlRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let header = rd.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (n, rec) in rd.records().enumerate() {
        let line = n as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let bad = |msg: &str| Error::Parse { line, msg: msg.into() };
        let cache_id = rec[1].parse().map_err(|_| bad("cache_id is not an integer"))?;
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| bad("not a number"))
            }
        };
        let rate = match (num(&rec[2])?, num(&rec[3])?) {
            (Some(r), _) => r,
            (None, Some(m)) if m == 0.0 => f64::INFINITY,
            (None, Some(m)) => 1.0 / m,
            (None, None) => return Err(bad("ttl_rate or ttl_mean is required")),
        };
        if !(rate >= 0.0) {
            return Err(bad("TTL rate must be non-negative"));
        }
        out.push(row_for(rec[0].to_string(), cache_id, rate));
    }
    Ok(out)
}

/// Assemble a `TtlConfig` for the objects in `labels`. Rows for other ids are ignored.
pub fn to_config(rows: &[TtlRow], labels: &[String], n_caches: usize) -> Result<TtlConfig> {
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut x = vec![f64::NAN; labels.len() * n_caches];
    let mut ignored = 0usize;
    for r in rows {
        let Some(&i) = index.get(r.object_id.as_str()) else {
            ignored += 1;
            continue;
        };
        if r.cache_id >= n_caches {
            return Err(Error::Config(format!("TTL row for cache {} but the tree has {n_caches}", r.cache_id)));
        }
        x[i * n_caches + r.cache_id] = r.ttl_rate.clamp(INFINITE_TTL_RATE, NEVER_CACHE_RATE);
    }
    if ignored > 0 {
        log::warn!("ignored {ignored} TTL rows for objects outside the scenario");
    }
    if let Some(p) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::Config(format!(
            "no TTL for object {} at cache {}",
            labels[p / n_caches],
            p % n_caches
        )));
    }
    TtlConfig::new(labels.len(), n_caches, x)
}

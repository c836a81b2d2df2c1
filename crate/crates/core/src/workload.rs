//! Zipf workloads and request-trace ingestion.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::ObjectDemand;

/// Estimator used for trace request rates, echoed in output metadata.
pub const RATE_ESTIMATOR: &str = "(count - 1) / (last - first)";

fn default_s() -> f64 {
    0.8
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipfSpec {
    pub n_objects: usize,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub n_leaves: usize,
    #[serde(default = "default_true")]
    pub homogeneous: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ZipfSpec {
    pub fn new(n_objects: usize, s: f64, n_leaves: usize) -> Self {
        Self {
            n_objects,
            s,
            n_leaves,
            homogeneous: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return Err(Error::param("workload needs at least one object"));
        }
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return Err(Error::param("Zipf exponent must be >= 0"));
        }
        if self.n_leaves == 0 {
            return Err(Error::param("workload needs at least one leaf"));
        }
        Ok(())
    }
}

/// Rate of popularity index `j` (1-based).
pub fn zipf_rate(j: usize, s: f64) -> f64 {
    (j as f64).powf(-s)
}

/// `rates[object][leaf]`. Heterogeneous mode draws an independent
/// permutation of popularity indices at each leaf.
pub fn zipf_rates(spec: &ZipfSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = spec.n_objects;
    let mut rates = vec![vec![0.0; spec.n_leaves]; n];
    for leaf in 0..spec.n_leaves {
        let mut index: Vec<usize> = (0..n).collect();
        if !spec.homogeneous {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(leaf as u64);
            index.shuffle(&mut rng);
        }
        for (obj, row) in rates.iter_mut().enumerate() {
            row[leaf] = zipf_rate(index[obj] + 1, spec.s);
        }
    }
    Ok(rates)
}

pub fn demands_from_rates(rates: &[Vec<f64>]) -> Result<Vec<ObjectDemand>> {
    rates
        .iter()
        .enumerate()
        .map(|(i, r)| ObjectDemand::poisson(i, r))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceObject {
    pub id: String,
    /// Estimated total request rate.
    pub rate: f64,
    /// Trace request count, used as the utility weight.
    pub weight: f64,
    /// Requests per leaf index.
    pub leaf_counts: Vec<u64>,
}

impl TraceObject {
    /// Total rate split over leaves in proportion to the observed counts.
    pub fn leaf_rates(&self) -> Vec<f64> {
        let total: u64 = self.leaf_counts.iter().sum();
        self.leaf_counts
            .iter()
            .map(|&c| self.rate * c as f64 / total as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceWorkload {
    pub objects: Vec<TraceObject>,
    pub dropped: Vec<String>,
    pub dropped_requests: u64,
    pub total_requests: u64,
    pub n_leaves: usize,
    pub estimator: String,
}

impl TraceWorkload {
    pub fn demands(&self) -> Result<Vec<ObjectDemand>> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| ObjectDemand::poisson(i, &o.leaf_rates()))
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.objects.iter().map(|o| o.weight).collect()
    }
}

struct Seen {
    first: f64,
    last: f64,
    leaf_counts: Vec<u64>,
}

/// Read a headerless `timestamp,object_id[,leaf]` CSV.
pub fn ingest_trace<R: Read>(source: R, min_requests: u64) -> Result<TraceWorkload> {
    if min_requests < 2 {
        return Err(Error::param("min_requests must be at least 2"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut order: Vec<String> = Vec::new();
    let mut seen: HashMap<String, Seen> = HashMap::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut total = 0u64;
    let mut n_leaves = 1usize;
    for (row, rec) in reader.records().enumerate() {
        let line = row as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() < 2 || rec.len() > 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 or 3 fields, found {}", rec.len()),
            });
        }
        let t: f64 = rec[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp {:?}", &rec[0]),
        })?;
        if !t.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "timestamp is not finite".into(),
            });
        }
        if t < last_t {
            return Err(Error::Parse {
                line,
                msg: format!("timestamp {t} is earlier than the previous row"),
            });
        }
        last_t = t;
        let id = rec[1].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty object id".into(),
            });
        }
        let leaf: usize = match rec.get(2) {
            Some(s) => s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad leaf index {s:?}"),
            })?,
            None => 0,
        };
        n_leaves = n_leaves.max(leaf + 1);
        let e = seen.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Seen {
                first: t,
                last: t,
                leaf_counts: Vec::new(),
            }
        });
        e.last = t;
        if e.leaf_counts.len() <= leaf {
            e.leaf_counts.resize(leaf + 1, 0);
        }
        e.leaf_counts[leaf] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::param("trace is empty"));
    }
    let mut objects = Vec::new();
    let mut dropped = Vec::new();
    let mut dropped_requests = 0;
    for id in order {
        let s = &seen[&id];
        let count: u64 = s.leaf_counts.iter().sum();
        let span = s.last - s.first;
        if count < min_requests || !(span > 0.0) {
            if count >= min_requests {
                log::warn!("object {id} has {count} requests at a single instant; dropped");
            }
            dropped.push(id);
            dropped_requests += count;
            continue;
        }
        let mut leaf_counts = s.leaf_counts.clone();
        leaf_counts.resize(n_leaves, 0);
        objects.push(TraceObject {
            id,
            rate: (count - 1) as f64 / span,
            weight: count as f64,
            leaf_counts,
        });
    }
    Ok(TraceWorkload {
        objects,
        dropped,
        dropped_requests,
        total_requests: total,
        n_leaves,
        estimator: RATE_ESTIMATOR.into(),
    })
}

/// Poisson trace with Zipf rates: `(time, object id, leaf)` rows.
pub fn synthesize_trace(spec: &ZipfSpec, n_requests: usize) -> Result<Vec<(f64, String, usize)>> {
    let rates = zipf_rates(spec)?;
    let streams: Vec<(usize, usize, f64)> = rates
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &l)| (i, j, l)))
        .filter(|s| s.2 > 0.0)
        .collect();
    let total: f64 = streams.iter().map(|s| s.2).sum();
    let cumulative: Vec<f64> = streams
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.2;
            Some(*acc)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let gap = Exp::new(total).map_err(|e| Error::param(e.to_string()))?;
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n_requests);
    for _ in 0..n_requests {
        t += gap.sample(&mut rng);
        let u = rand::Rng::random::<f64>(&mut rng) * total;
        let k = cumulative.partition_point(|&c| c <= u).min(streams.len() - 1);
        let (i, j, _) = streams[k];
        out.push((t, format!("obj{i}"), j));
    }
    Ok(out)
}

pub fn write_trace<W: Write>(rows: &[(f64, String, usize)], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for (t, id, leaf) in rows {
        wr.write_record([format!("{t:.9}"), id.clone(), leaf.to_string()])
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zipf_values() {
        let r = zipf_rates(&ZipfSpec::new(3, 0.8, 1)).unwrap();
        assert_eq!(r[0][0], 1.0);
        assert_relative_eq!(r[1][0], 0.574_349_177_498_517_4, epsilon = 1e-15);
        assert_relative_eq!(r[2][0], 0.415_243_646_538_505_8, epsilon = 1e-15);
        let flat = zipf_rates(&ZipfSpec::new(4, 0.0, 2)).unwrap();
        assert!(flat.iter().flatten().all(|&v| v == 1.0));
        let big = zipf_rates(&ZipfSpec::new(100, 0.8, 1)).unwrap();
        assert_relative_eq!(big[0][0] / big[99][0], 100f64.powf(0.8), max_relative = 1e-12);
    }

    #[test]
    fn heterogeneous_leaves_permute_the_rates() {
        let mut spec = ZipfSpec::new(20, 0.8, 3);
        spec.homogeneous = false;
        spec.seed = 7;
        let het = zipf_rates(&spec).unwrap();
        let hom = zipf_rates(&ZipfSpec::new(20, 0.8, 3)).unwrap();
        let mut want: Vec<f64> = hom.iter().map(|r| r[0]).collect();
        want.sort_by(f64::total_cmp);
        let mut differs = false;
        for leaf in 0..3 {
            let mut got: Vec<f64> = het.iter().map(|r| r[leaf]).collect();
            differs |= got.iter().zip(&hom).any(|(a, b)| *a != b[leaf]);
            got.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
        assert!(differs);
        assert_eq!(het, zipf_rates(&spec).unwrap());
    }

    #[test]
    fn trace_rates_and_filtering() {
        let mut s = String::new();
        for t in 0..15 {
            s.push_str(&format!("{t},hot\n"));
            if t < 14 {
                s.push_str(&format!("{t}.5,warm\n"));
            }
        }
        s.push_str("20,once\n");
        let w = ingest_trace(s.as_bytes(), 15).unwrap();
        assert_eq!(w.objects.len(), 1);
        assert_eq!(w.objects[0].id, "hot");
        assert_relative_eq!(w.objects[0].rate, 1.0);
        assert_eq!(w.objects[0].weight, 15.0);
        assert_eq!(w.dropped, vec!["warm".to_string(), "once".to_string()]);
        assert_eq!(w.total_requests, 30);
        assert_eq!(w.dropped_requests + 15, w.total_requests);
        let w2 = ingest_trace(s.as_bytes(), 2).unwrap();
        assert_eq!(w2.dropped, vec!["once".to_string()]);
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        assert!(matches!(
            ingest_trace("1,a\n0.5,b\n".as_bytes(), 15),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ingest_trace("1,a\nxx,b\n".as_bytes(), 15),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(ingest_trace("".as_bytes(), 15), Err(Error::Parameter(_))));
    }

    #[test]
    fn leaf_column_splits_rates() {
        let mut s = String::new();
        for t in 0..20 {
            s.push_str(&format!("{t},x,{}\n", if t % 4 == 0 { 1 } else { 0 }));
        }
        let w = ingest_trace(s.as_bytes(), 15).unwrap();
        assert_eq!(w.n_leaves, 2);
        let r = w.objects[0].leaf_rates();
        assert_relative_eq!(r[0] + r[1], 1.0);
        assert_relative_eq!(r[1], 0.25);
    }

    #[test]
    fn synthetic_trace_round_trips() {
        let spec = ZipfSpec::new(10, 0.8, 2);
        let rows = synthesize_trace(&spec, 5000).unwrap();
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let w = ingest_trace(buf.as_slice(), 15).unwrap();
        assert_eq!(w.total_requests, 5000);
        let hot = w.objects.iter().find(|o| o.id == "obj0").unwrap();
        // two leaves at rate 1 each
        assert!((hot.rate - 2.0).abs() < 0.3, "{}", hot.rate);
    }
}

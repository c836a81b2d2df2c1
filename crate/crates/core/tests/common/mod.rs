#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttlcache::objective::{ProblemInstance, TtlConfig};
use ttlcache::ph::PhaseDist;
use ttlcache::tree::{CacheTree, ObjectDemand};
use ttlcache::utility::UtilitySpec;
use ttlcache::workload::{demands_from_rates, zipf_rates, ZipfSpec};

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo..hi))
}

/// Random instance with at most three caches and ten objects, plus a random
/// interior TTL point. Some instances use Erlang request streams.
pub fn random_instance(seed: u64) -> (ProblemInstance, TtlConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_c = rng.random_range(1..=3usize);
    let n = rng.random_range(2..=10usize);
    let phi = log_uniform(&mut rng, -0.5, 1.0);
    let cap = (rng.random_range(0.25..0.6) * n as f64).round().clamp(1.0, n as f64 - 1.0);
    let tree = CacheTree::two_level(n_c, cap, phi).unwrap();
    let erlang = n_c == 1 && rng.random_bool(0.5);
    let demands = (0..n)
        .map(|i| {
            let streams = (0..tree.n_leaves())
                .map(|_| {
                    let rate = log_uniform(&mut rng, -1.0, 0.5);
                    Some(if erlang {
                        PhaseDist::erlang(2, 2.0 * rate).unwrap()
                    } else {
                        PhaseDist::exponential(rate).unwrap()
                    })
                })
                .collect();
            ObjectDemand::new(i, streams).unwrap()
        })
        .collect();
    let alpha = [0.5, 1.0, 2.0][rng.random_range(0..3usize)];
    let inst = ProblemInstance::new(tree, demands, UtilitySpec::new(alpha).unwrap()).unwrap();
    let x = TtlConfig::new(n, n_c, (0..n * n_c).map(|_| log_uniform(&mut rng, -1.0, 0.5)).collect()).unwrap();
    (inst, x)
}

/// Binary tree with Zipf(0.8) requests, identical at both leaves.
pub fn zipf_binary(n: usize, capacity: f64, fetch_rate: f64) -> ProblemInstance {
    let rates = zipf_rates(&ZipfSpec::new(n, 0.8, 2)).unwrap();
    let tree = CacheTree::binary(capacity, fetch_rate).unwrap();
    ProblemInstance::new(tree, demands_from_rates(&rates).unwrap(), UtilitySpec::proportional()).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Entrywise relative error. Entries below `1e-6 * scale` are compared
/// against that floor, where `scale` is at least the largest magnitude.
pub fn rel_err(a: &[f64], b: &[f64], scale: f64) -> f64 {
    let floor = 1e-6 * scale.max(max_abs(a)).max(max_abs(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor).max(1e-300))
        .fold(0.0, f64::max)
}

/// Central difference of `f` around `x` in coordinate `a`, relative step.
pub fn central<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], a: usize) -> Vec<f64> {
    let h = 1e-4 * x[a];
    let mut up = x.to_vec();
    let mut dn = x.to_vec();
    up[a] += h;
    dn[a] -= h;
    f(&up).iter().zip(f(&dn)).map(|(u, d)| (u - d) / (2.0 * h)).collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdErrors {
    pub grad: f64,
    pub hess: f64,
    pub jac: f64,
    pub occ_hess: f64,
}

/// Compare analytic derivatives with central differences, object by object.
pub fn fd_errors(inst: &ProblemInstance, x: &TtlConfig) -> FdErrors {
    use ttlcache::objective::{evaluate, evaluate_object, Order};
    let n_c = inst.n_caches();
    let full = evaluate(inst, x, Order::Second).unwrap();
    let jac = full.jacobian();
    let mut e = FdErrors::default();
    for i in 0..inst.n_objects() {
        let ev = &full.objects[i];
        let value = |r: &[f64]| {
            let o = evaluate_object(inst, r, i, Order::Value).unwrap();
            let mut v = vec![-o.utility_exact];
            v.extend(o.occupancy);
            v
        };
        let first = |r: &[f64]| {
            let o = evaluate_object(inst, r, i, Order::First).unwrap();
            let mut v = o.grad.clone();
            v.extend(o.occ_jac.iter().copied());
            v
        };
        let x_i = x.object(i);
        let mut g_fd = Vec::new();
        let mut j_fd = Vec::new();
        let mut j_an = Vec::new();
        let mut h_fd = Vec::new();
        let mut oh_fd = Vec::new();
        let mut h_an = Vec::new();
        let mut oh_an = Vec::new();
        for a in 0..n_c {
            let d = central(value, x_i, a);
            g_fd.push(d[0]);
            for k in 0..n_c {
                j_fd.push(d[1 + k]);
                j_an.push(jac[(i * n_c + a, k)]);
            }
            let d2 = central(first, x_i, a);
            for b in 0..n_c {
                h_fd.push(d2[b]);
                h_an.push(ev.hess[(b, a)]);
                for k in 0..n_c {
                    // occ_jac is column-major: entry (k, b) sits at b * n_c + k
                    oh_fd.push(d2[n_c + b * n_c + k]);
                    oh_an.push(ev.occ_hess[k][(b, a)]);
                }
            }
        }
        // second derivatives are measured against first derivative / rate
        let x_min = x_i.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        e.grad = e.grad.max(rel_err(&ev.grad, &g_fd, 0.0));
        e.jac = e.jac.max(rel_err(&j_an, &j_fd, 0.0));
        e.hess = e.hess.max(rel_err(&h_an, &h_fd, max_abs(&ev.grad) / x_min));
        e.occ_hess = e.occ_hess.max(rel_err(&oh_an, &oh_fd, max_abs(&j_an) / x_min));
    }
    e
}

mod common;

use common::random_instance;
use proptest::prelude::*;
use ttlcache::closed_form::single_cache_closed_form_capped;
use ttlcache::objective::{evaluate, Order, ProblemInstance, TtlConfig};
use ttlcache::sim::{simulate, Policy, Scenario};
use ttlcache::solver::{initial_point, solve, SolveResult, SolverOptions};
use ttlcache::steady::steady_state;
use ttlcache::tree::CacheTree;
use ttlcache::ttl_file;
use ttlcache::utility::UtilitySpec;
use ttlcache::workload::{demands_from_rates, ingest_trace, synthesize_trace, write_trace, zipf_rates, ZipfSpec};

/// Checks every converged solve must pass. Returns a description of the first violation.
pub fn contract_violation(r: &SolveResult) -> Option<String> {
    let c = r.state.residuals.primal;
    if c > 1e-8 {
        return Some(format!("||c||_inf = {c:e}"));
    }
    if let Some(v) = r.state.x.as_slice().iter().find(|v| !(**v > 0.0)) {
        return Some(format!("x = {v}"));
    }
    if let Some(v) = r.state.z.iter().find(|v| !(**v > 0.0)) {
        return Some(format!("z = {v}"));
    }
    for rec in &r.log {
        if rec.merit > rec.merit_prev + 1e-12 * rec.merit_prev.abs().max(1.0) {
            return Some(format!("merit rose {} -> {} at {}/{}", rec.merit_prev, rec.merit, rec.outer, rec.inner));
        }
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_and_steady_state(seed in any::<u64>()) {
        let (inst, x) = random_instance(seed);
        for i in 0..inst.n_objects() {
            let m = inst.object_model(i, x.object(i)).unwrap();
            let q = m.generator();
            for r in 0..m.n_states() {
                let row: f64 = q.row(r).iter().sum();
                prop_assert!(row.abs() < 1e-9 * q[(r, r)].abs().max(1.0));
                for c in 0..m.n_states() {
                    prop_assert!(r == c || q[(r, c)] >= 0.0);
                }
            }
            let ss = steady_state(&m).unwrap();
            prop_assert!((ss.pi.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(ss.pi.iter().all(|p| *p >= -1e-12));
            prop_assert!(ss.residual < 1e-9);
        }
    }

    #[test]
    fn system_hit_is_rate_weighted_leaf_hit(seed in any::<u64>()) {
        let (inst, x) = random_instance(seed);
        let ev = evaluate(&inst, &x, Order::Value).unwrap();
        for (i, o) in ev.objects.iter().enumerate() {
            let d = &inst.demands[i];
            let w: f64 = (0..d.n_leaves()).map(|j| d.rate(j) * o.leaf_hit[j].unwrap()).sum::<f64>() / d.total_rate();
            prop_assert!((w - o.system_hit).abs() < 1e-12);
            prop_assert!(o.occupancy.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(o.leaf_hit.iter().all(|p| (0.0..=1.0).contains(&p.unwrap())));
        }
    }

    #[test]
    fn longer_ttl_raises_own_occupancy(seed in any::<u64>(), factor in 1.1f64..10.0) {
        let (inst, x) = random_instance(seed);
        let base = evaluate(&inst, &x, Order::Value).unwrap();
        for k in 0..inst.n_caches() {
            let mut y = x.clone();
            for i in 0..inst.n_objects() {
                y.set(i, k, x.get(i, k) / factor);
            }
            let ev = evaluate(&inst, &y, Order::Value).unwrap();
            for i in 0..inst.n_objects() {
                prop_assert!(ev.objects[i].occupancy[k] >= base.objects[i].occupancy[k] - 1e-12);
                if let Some(j) = inst.tree.leaf_index(k) {
                    prop_assert!(ev.objects[i].leaf_hit[j].unwrap() >= base.objects[i].leaf_hit[j].unwrap() - 1e-12);
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_and_within_capacity(
        seed in any::<u64>(),
        sim_seed in 0u64..1000,
        policy in prop::sample::select(vec![Policy::Lru, Policy::Fifo, Policy::Random, Policy::TtlPure, Policy::TtlMin, Policy::TtlMinExtnd]),
    ) {
        let (inst, x) = random_instance(seed);
        let ttl = policy.uses_ttl().then_some(x);
        let s = Scenario::new(inst.tree.clone(), inst.demands.clone(), policy, ttl, 5_000, sim_seed).unwrap();
        let a = simulate(&s).unwrap();
        let b = simulate(&s).unwrap();
        prop_assert_eq!(&a.event_hash, &b.event_hash);
        prop_assert_eq!(&a.objects, &b.objects);
        for k in 0..inst.n_caches() {
            let cap = inst.tree.capacity(k);
            if policy != Policy::TtlPure {
                prop_assert!(a.cache_occupancy[k] <= cap + 1e-9, "cache {} holds {} of {}", k, a.cache_occupancy[k], cap);
            }
        }
        let requests: u64 = a.objects.iter().flat_map(|o| o.requests.iter()).sum();
        prop_assert_eq!(requests, a.measured_requests);
    }

    #[test]
    fn ttl_file_round_trip(rates in prop::collection::vec(1e-6f64..1e6, 1..20)) {
        let n = rates.len();
        let x = TtlConfig::new(n, 1, rates.clone()).unwrap();
        let labels: Vec<String> = (0..n).map(|i| format!("o{i}")).collect();
        let mut buf = Vec::new();
        ttl_file::write(&ttl_file::rows(&x, &labels, &[]), &mut buf).unwrap();
        let back = ttl_file::to_config(&ttl_file::read(buf.as_slice()).unwrap(), &labels, 1).unwrap();
        for (a, b) in back.as_slice().iter().zip(&rates) {
            prop_assert!((a / b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zipf_rates_decrease(n in 1usize..200, s in 0.1f64..2.0, leaves in 1usize..4) {
        let r = zipf_rates(&ZipfSpec::new(n, s, leaves)).unwrap();
        prop_assert_eq!(r.len(), n);
        for j in 0..leaves {
            prop_assert!(r.windows(2).all(|w| w[0][j] > w[1][j]));
            prop_assert!((r[0][j] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn trace_ingest_preserves_counts(n in 2usize..30, requests in 200usize..2000, min in 2u64..5) {
        let spec = ZipfSpec::new(n, 0.8, 2);
        let rows = synthesize_trace(&spec, requests).unwrap();
        prop_assert!(rows.windows(2).all(|w| w[0].0 <= w[1].0));
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let t = ingest_trace(buf.as_slice(), min).unwrap();
        let kept: u64 = t.objects.iter().map(|o| o.leaf_counts.iter().sum::<u64>()).sum();
        let dropped = rows.iter().filter(|r| t.dropped.contains(&r.1)).count() as u64;
        prop_assert_eq!(kept + dropped, requests as u64);
        for o in &t.objects {
            prop_assert!(o.leaf_counts.iter().sum::<u64>() >= min);
            prop_assert!(o.leaf_rates().iter().all(|r| *r >= 0.0 && r.is_finite()));
        }
    }

    #[test]
    fn capped_closed_form_fills_capacity(n in 3usize..60, frac in 0.05f64..0.9, phi in 0.1f64..10.0, alpha in prop::sample::select(vec![0.5, 1.0, 2.0])) {
        let b = (frac * n as f64).max(1.0);
        let rates: Vec<f64> = zipf_rates(&ZipfSpec::new(n, 0.8, 1)).unwrap().iter().map(|r| r[0]).collect();
        let cf = single_cache_closed_form_capped(&rates, phi, b, &UtilitySpec::new(alpha).unwrap()).unwrap();
        let tree = CacheTree::single(b, phi).unwrap();
        let inst = ProblemInstance::new(tree, demands_from_rates(&rates.iter().map(|r| vec![*r]).collect::<Vec<_>>()).unwrap(), UtilitySpec::new(alpha).unwrap()).unwrap();
        let x = TtlConfig::new(n, 1, cf.ttl_rate.clone()).unwrap();
        let ev = evaluate(&inst, &x, Order::Value).unwrap();
        let occ: f64 = ev.objects.iter().map(|o| o.occupancy[0]).sum();
        prop_assert!((occ - b).abs() < 1e-6 * b, "occupancy {} vs {}", occ, b);
        for (o, p) in ev.objects.iter().zip(&cf.hit) {
            prop_assert!((o.system_hit - p).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solver_contract(seed in any::<u64>()) {
        let (inst, _) = random_instance(seed);
        let x0 = initial_point(&inst).unwrap();
        let r = solve(&inst, &x0, &SolverOptions::default()).unwrap();
        if r.converged {
            prop_assert!(contract_violation(&r).is_none(), "{:?}", contract_violation(&r));
        }
        let again = solve(&inst, &x0, &SolverOptions::default()).unwrap();
        prop_assert_eq!(r.state.x.as_slice(), again.state.x.as_slice());
    }
}

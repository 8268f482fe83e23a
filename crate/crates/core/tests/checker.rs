mod common;

use common::{fixture, NEGATIVE_FIXTURES};
use dsm_core::sim::{check_trace, gen_workload, run, Profile, SimConfig};
use dsm_core::GasConfig;

#[test]
fn negative_fixtures_flagged() {
    for (file, kind) in NEGATIVE_FIXTURES {
        let report = check_trace(&fixture(file));
        assert!(
            report.violations.iter().any(|v| v.kind.name() == kind),
            "{file}: expected {kind}, got\n{report}"
        );
    }
}

#[test]
fn early_transfer_is_only_a_slice_violation() {
    let report = check_trace(&fixture("early_transfer.trace"));
    assert_eq!(report.machine_lines(), "VIOLATION slice 5\n");
}

#[test]
fn rendered_trace_reparses_identically() {
    let gas = GasConfig::default();
    let out = run(&SimConfig::new(gas.clone()), &gen_workload(4, &Profile::write_contended(&gas)), 4).unwrap();
    let again = dsm_core::sim::Trace::parse(&out.trace.render()).unwrap();
    assert_eq!(again, out.trace);
    assert!(check_trace(&again).is_clean());
}

#[test]
fn small_cache_contention_is_clean() {
    let gas = GasConfig {
        gas_size: 256 * 1024,
        cache_size: 8 * 1024,
        slice_len: std::time::Duration::from_micros(30),
        ..GasConfig::default()
    };
    for seed in 0..40 {
        for profile in [Profile::write_contended(&gas), Profile::lock_protected(&gas), Profile::read_heavy(&gas)] {
            let out = run(&SimConfig::new(gas.clone()), &gen_workload(seed, &profile), seed).unwrap();
            let report = check_trace(&out.trace);
            assert!(report.is_clean(), "seed {seed} {:?}: {report}", profile.mix);
        }
    }
}

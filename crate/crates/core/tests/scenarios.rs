mod common;

use common::*;

fn assert_scenario(s: Scenario) {
    assert!(
        s.passed(),
        "{}: expected {:?}, got {:?} ({:?})",
        s.name,
        s.expected,
        kinds(&s.observed),
        s.problem
    );
}

#[test]
fn read_of_server_current_page() {
    assert_scenario(scenario_read_current());
}

#[test]
fn read_redirected_to_holder() {
    assert_scenario(scenario_read_redirect());
}

#[test]
fn write_invalidates_readers_first() {
    assert_scenario(scenario_write_invalidate());
}

#[test]
fn write_handoff_waits_for_slice() {
    assert_scenario(scenario_write_handoff());
}

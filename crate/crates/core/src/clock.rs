//! Per-node local clocks. Nodes never synchronize; each measures its write
//! time slice against its own clock.

/// `local(t) = floor((t + offset) * drift)`, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSkew {
    pub offset_ns: i64,
    pub drift: f64,
}

impl Default for ClockSkew {
    fn default() -> Self {
        Self {
            offset_ns: 0,
            drift: 1.0,
        }
    }
}

impl ClockSkew {
    pub fn new(offset_ns: i64, drift: f64) -> Self {
        assert!(drift.is_finite() && drift > 0.0, "drift must be positive");
        Self { offset_ns, drift }
    }

    pub fn local(&self, global_ns: u64) -> i64 {
        ((global_ns as i64 + self.offset_ns) as f64 * self.drift).floor() as i64
    }

    /// Earliest global instant `>= not_before` whose local reading is at least
    /// `local_deadline`.
    pub fn global_at(&self, local_deadline: i64, not_before: u64) -> u64 {
        if self.local(not_before) >= local_deadline {
            return not_before;
        }
        let est = (local_deadline as f64 / self.drift).ceil() as i64 - self.offset_ns;
        let mut t = est.max(not_before as i64) as u64;
        while self.local(t) < local_deadline {
            t += 1;
        }
        while t > not_before && self.local(t - 1) >= local_deadline {
            t -= 1;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_clock() {
        let c = ClockSkew::default();
        assert_eq!(c.local(1234), 1234);
        assert_eq!(c.global_at(5000, 0), 5000);
        assert_eq!(c.global_at(5000, 7000), 7000);
    }

    #[test]
    fn slow_clock_needs_more_global_time() {
        let c = ClockSkew::new(-5_000_000, 0.5);
        let t = c.global_at(c.local(10_000_000) + 10_000_000, 10_000_000);
        assert_eq!(t, 30_000_000);
    }

    proptest! {
        #[test]
        fn global_at_is_earliest(offset in -10_000_000i64..10_000_000, drift in 0.5f64..1.5,
                                 start in 0u64..50_000_000, span in 0i64..20_000_000) {
            let c = ClockSkew::new(offset, drift);
            let deadline = c.local(start) + span;
            let t = c.global_at(deadline, start);
            prop_assert!(t >= start);
            prop_assert!(c.local(t) >= deadline);
            if t > start {
                prop_assert!(c.local(t - 1) < deadline);
            }
        }

        #[test]
        fn local_is_monotone(offset in -10_000_000i64..10_000_000, drift in 0.5f64..1.5, t in 0u64..1u64<<40) {
            let c = ClockSkew::new(offset, drift);
            prop_assert!(c.local(t + 1) >= c.local(t));
        }
    }
}

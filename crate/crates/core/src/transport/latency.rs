use std::time::Duration;

/// Two-term link cost: fixed per-message latency plus payload serialization.
/// Also carries the local memory cost model used for cache hits.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyModel {
    pub base_latency: Duration,
    /// Link bandwidth in bytes per microsecond.
    pub bandwidth: f64,
    /// Local memory copy bandwidth in bytes per microsecond.
    pub local_copy_bw: f64,
    /// Fixed software cost of one cached page access.
    pub access_overhead: Duration,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_latency: Duration::from_micros(10),
            bandwidth: 250.0,
            local_copy_bw: 2000.0,
            access_overhead: Duration::from_nanos(50),
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = |bw: f64| bw.is_finite() && bw > 0.0;
        if !ok(self.bandwidth) || !ok(self.local_copy_bw) {
            return Err(crate::Error::Config("bandwidths must be positive".into()));
        }
        Ok(())
    }

    /// Nanoseconds on the wire for a message with `payload` bytes.
    pub fn transit_ns(&self, payload: usize) -> u64 {
        self.base_latency.as_nanos() as u64 + bytes_ns(payload, self.bandwidth)
    }

    pub fn delivery_time(&self, send_ns: u64, payload: usize) -> u64 {
        send_ns + self.transit_ns(payload)
    }

    /// Nanoseconds for a cached access that copies `len` bytes.
    pub fn local_access_ns(&self, len: usize) -> u64 {
        self.access_overhead.as_nanos() as u64 + bytes_ns(len, self.local_copy_bw)
    }

    pub fn local_copy_ns(&self, len: usize) -> u64 {
        bytes_ns(len, self.local_copy_bw)
    }
}

fn bytes_ns(len: usize, bytes_per_us: f64) -> u64 {
    if len == 0 {
        return 0;
    }
    (len as f64 * 1000.0 / bytes_per_us).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_data_transit() {
        let m = LatencyModel::default();
        // 10us + 4096 B / 250 B/us = 26.384us
        assert_eq!(m.transit_ns(4096), 26_384);
        assert_eq!(m.delivery_time(1_000, 4096), 27_384);
    }

    #[test]
    fn empty_payload_costs_base_only() {
        let m = LatencyModel::default();
        assert_eq!(m.transit_ns(0), 10_000);
    }

    #[test]
    fn rejects_zero_bandwidth() {
        let m = LatencyModel {
            bandwidth: 0.0,
            ..LatencyModel::default()
        };
        assert!(m.validate().is_err());
    }
}

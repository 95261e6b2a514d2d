//! Run metrics and their flat text form.

use std::fmt;

/// Summary of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    /// Delivered tasks (AGV) or arrived vehicles (traffic).
    pub tasks_completed: u64,
    pub mean_assignment_latency_ticks: f64,
    /// Provisional-winner switches (AGV) or intention switches (traffic).
    pub switch_count: u64,
    pub lock_conflict_wait_ticks: u64,
    pub booking_reject_count: u64,
    pub trace_hash: u64,
}

impl RunMetrics {
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    /// Inverse of [`to_text`](Self::to_text).
    pub fn parse(text: &str) -> Option<RunMetrics> {
        let mut m = RunMetrics::default();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=')?;
            match k {
                "tasks_completed" => m.tasks_completed = v.parse().ok()?,
                "mean_assignment_latency_ticks" => m.mean_assignment_latency_ticks = v.parse().ok()?,
                "switch_count" => m.switch_count = v.parse().ok()?,
                "lock_conflict_wait_ticks" => m.lock_conflict_wait_ticks = v.parse().ok()?,
                "booking_reject_count" => m.booking_reject_count = v.parse().ok()?,
                "trace_hash" => m.trace_hash = u64::from_str_radix(v, 16).ok()?,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 6).then_some(m)
    }
}

impl fmt::Display for RunMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tasks_completed={}", self.tasks_completed)?;
        writeln!(f, "mean_assignment_latency_ticks={:.3}", self.mean_assignment_latency_ticks)?;
        writeln!(f, "switch_count={}", self.switch_count)?;
        writeln!(f, "lock_conflict_wait_ticks={}", self.lock_conflict_wait_ticks)?;
        writeln!(f, "booking_reject_count={}", self.booking_reject_count)?;
        writeln!(f, "trace_hash={:016x}", self.trace_hash)
    }
}

/// Mean of `xs`, zero when empty.
pub fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<u64>() as f64 / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_block() {
        let text = RunMetrics::default().to_text();
        assert_eq!(
            text,
            "tasks_completed=0\nmean_assignment_latency_ticks=0.000\nswitch_count=0\nlock_conflict_wait_ticks=0\nbooking_reject_count=0\ntrace_hash=0000000000000000\n"
        );
    }

    #[test]
    fn round_trip() {
        let m = RunMetrics {
            tasks_completed: 3,
            mean_assignment_latency_ticks: 2.5,
            switch_count: 1,
            lock_conflict_wait_ticks: 7,
            booking_reject_count: 0,
            trace_hash: 0xdead_beef_0000_0001,
        };
        assert_eq!(RunMetrics::parse(&m.to_text()), Some(m));
        assert_eq!(RunMetrics::parse("tasks_completed=1\n"), None);
    }

    #[test]
    fn mean_of_nothing() {
        assert_eq!(mean(&[]), 0.0);
        assert_eq!(mean(&[1, 2]), 1.5);
    }
}

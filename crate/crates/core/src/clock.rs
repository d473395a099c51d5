/// Simulated wall clock in milliseconds. Only moves forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now_ms: u64,
}

impl SimClock {
    pub fn at(now_ms: u64) -> Self {
        SimClock { now_ms }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn advance_by(&mut self, ms: u64) {
        self.now_ms += ms;
    }

    /// Moves to `t_ms`; earlier targets are ignored.
    pub fn advance_to(&mut self, t_ms: u64) {
        self.now_ms = self.now_ms.max(t_ms);
    }
}

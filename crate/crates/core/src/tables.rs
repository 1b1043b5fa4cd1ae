//! Dense step-indexed value tables.
//!
//! Step indices are 0-based throughout the crate: `h` runs over `0..H`,
//! so the final decision step is `H - 1` and the value ceiling at step
//! `h` is `H - h` (one unit of reward per remaining step).

/// Action-value table indexed by `(h, s, a)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    data: Vec<f64>,
}

impl QTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        QTable {
            horizon,
            num_states,
            num_actions,
            data: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn from_fn(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(horizon, num_states, num_actions);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    t.set(h, s, a, f(h, s, a));
                }
            }
        }
        t
    }

    #[inline]
    fn idx(&self, h: usize, s: usize, a: usize) -> usize {
        debug_assert!(h < self.horizon && s < self.num_states && a < self.num_actions);
        (h * self.num_states + s) * self.num_actions + a
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[self.idx(h, s, a)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, s: usize, a: usize, v: f64) {
        let i = self.idx(h, s, a);
        self.data[i] = v;
    }

    /// Action values at `(h, s)` as a slice of length `num_actions`.
    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let i = self.idx(h, s, 0);
        &self.data[i..i + self.num_actions]
    }

    /// The full `[s][a]` slab for one step.
    pub fn step(&self, h: usize) -> &[f64] {
        let n = self.num_states * self.num_actions;
        &self.data[h * n..(h + 1) * n]
    }

    /// Copies `values` (flat `[s][a]`, length `S * A`) into step `h`.
    pub fn set_step(&mut self, h: usize, values: &[f64]) {
        let n = self.num_states * self.num_actions;
        assert_eq!(values.len(), n, "step slab length mismatch");
        self.data[h * n..(h + 1) * n].copy_from_slice(values);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// State-value table indexed by `(h, s)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    pub horizon: usize,
    pub num_states: usize,
    data: Vec<f64>,
}

impl VTable {
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        VTable {
            horizon,
            num_states,
            data: vec![0.0; horizon * num_states],
        }
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize) -> f64 {
        debug_assert!(h < self.horizon && s < self.num_states);
        self.data[h * self.num_states + s]
    }

    #[inline]
    pub fn set(&mut self, h: usize, s: usize, v: f64) {
        debug_assert!(h < self.horizon && s < self.num_states);
        self.data[h * self.num_states + s] = v;
    }

    /// State values at step `h` as a slice of length `num_states`.
    #[inline]
    pub fn step(&self, h: usize) -> &[f64] {
        &self.data[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qtable_indexing_round_trips() {
        let t = QTable::from_fn(2, 3, 4, |h, s, a| (h * 100 + s * 10 + a) as f64);
        assert_eq!(t.get(0, 0, 0), 0.0);
        assert_eq!(t.get(1, 2, 3), 123.0);
        assert_eq!(t.row(1, 2), &[120.0, 121.0, 122.0, 123.0]);
        assert_eq!(t.step(0).len(), 12);
    }

    #[test]
    fn vtable_indexing_round_trips() {
        let mut t = VTable::zeros(2, 3);
        t.set(1, 2, 5.0);
        assert_eq!(t.get(1, 2), 5.0);
        assert_eq!(t.step(1), &[0.0, 0.0, 5.0]);
    }
}

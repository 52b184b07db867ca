//! Adagrad.

use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub eps: f64,
}

impl Adagrad {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            eps: 1e-8,
        }
    }

    pub fn with_eps(learning_rate: f64, eps: f64) -> Self {
        Self { learning_rate, eps }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// Per coordinate: `acc += g²; w -= lr · g / (√acc + eps)`. Coordinates
    /// with `g = 0` are left untouched, so sparse gradients cost nothing.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.params_mut() {
            if !p.frozen {
                let values = p.value.data_mut();
                let acc = p.accumulator.data_mut();
                for ((w, a), &g) in values.iter_mut().zip(acc.iter_mut()).zip(p.grad.data()) {
                    if g == 0.0 {
                        continue;
                    }
                    *a += g * g;
                    *w -= self.learning_rate * g / (a.sqrt() + self.eps);
                }
            }
            p.grad.fill(0.0);
        }
    }
}

use nalgebra::DVector;

/// An output-space curve t -> zeta(t) in R^{d_obs}, evaluable anywhere on [0, T].
///
/// The smoothed data proxy, shifted signals and exact model outputs all enter
/// the criterion through this interface.
pub trait OutputSignal: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64) -> DVector<f64>;
}

/// Closure-backed signal, mostly for tests and synthetic probes.
pub struct FnSignal<F: Fn(f64) -> DVector<f64> + Sync> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64) -> DVector<f64> + Sync> OutputSignal for FnSignal<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }
}

/// The zero signal.
pub struct ZeroSignal(pub usize);

impl OutputSignal for ZeroSignal {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _t: f64) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

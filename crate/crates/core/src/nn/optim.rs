//! Adam with coupled weight decay and global gradient-norm clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm the gradients are clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6, clip_norm: Some(1.0) }
    }
}

/// First and second moments of one trainable entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub name: String,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

/// Moment buffers for every trainable entry, in store order, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub moments: Vec<Moments<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let moments = store
            .entries()
            .iter()
            .filter(|e| e.trainable())
            .map(|e| Moments {
                name: e.name.clone(),
                m: ArrayD::zeros(e.value.raw_dim()),
                v: ArrayD::zeros(e.value.raw_dim()),
            })
            .collect();
        Self { step: 0, moments }
    }

    /// Checks that the buffers line up with the store's trainable entries.
    pub fn matches(&self, store: &ParamStore<F>) -> bool {
        let trainable: Vec<_> = store.entries().iter().filter(|e| e.trainable()).collect();
        trainable.len() == self.moments.len()
            && trainable
                .iter()
                .zip(&self.moments)
                .all(|(e, m)| e.name == m.name && e.value.shape() == m.m.shape() && e.value.shape() == m.v.shape())
    }
}

/// Global L2 norm of all gradients, computed in f64.
pub fn grad_norm<F: Real>(store: &ParamStore<F>) -> f64 {
    store
        .entries()
        .iter()
        .filter_map(|e| e.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm` and returns
/// the norm before clipping. Gradients already within the bound are untouched.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(store);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        for g in store.entries_mut().iter_mut().filter_map(|e| e.grad.as_mut()) {
            g.mapv_inplace(|v| v * scale);
        }
    }
    Ok(norm)
}

/// One Adam update from the gradients currently held in `store`.
///
/// Returns the gradient norm before clipping.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, state: &mut OptimizerState<F>, cfg: &AdamConfig, lr: f64) -> Result<f64> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::BadSchedule(format!("learning rate {lr} must be positive")));
    }
    if !state.matches(store) {
        return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let norm = match cfg.clip_norm {
        Some(max) => clip_grad_norm(store, max)?,
        None => {
            let n = grad_norm(store);
            if !n.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            n
        }
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let wd = F::of(cfg.weight_decay);
    let step_size = F::of(lr / bc1);
    let inv_bc2 = F::of(1.0 / bc2);
    let eps = F::of(cfg.eps);
    let trainable = store.entries_mut().iter_mut().filter(|e| e.trainable());
    for (entry, mom) in trainable.zip(state.moments.iter_mut()) {
        let grad = entry.grad.as_ref().expect("trainable entry has a gradient");
        ndarray::Zip::from(&mut entry.value)
            .and(grad)
            .and(&mut mom.m)
            .and(&mut mom.v)
            .for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            });
    }
    Ok(norm)
}

/// Optimizer configuration bundled with its state.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: OptimizerState<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        Self { config, state: OptimizerState::new(store) }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<f64> {
        adam_step(store, &mut self.state, &self.config, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayD, IxDyn};

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("p", Array1::from(values.to_vec()).into_dyn());
        s.add_buffer("running", ArrayD::zeros(IxDyn(&[2])));
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        let id = s.entries().iter().position(|e| e.name == "p").unwrap();
        s.entries_mut()[id].grad = Some(Array1::from(g.to_vec()).into_dyn());
    }

    fn values(s: &ParamStore<f64>) -> Vec<f64> {
        s.find("p").unwrap().value.iter().copied().collect()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(&[1.0, -2.0, 0.5]);
        let g = [0.3, -0.2, 0.1];
        set_grad(&mut s, &g);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &mut st, &cfg, 1e-2).unwrap();
        for ((new, old), g) in values(&s).iter().zip([1.0, -2.0, 0.5]).zip(g) {
            let expected = -1e-2 * g / (g.abs() + 1e-8);
            assert!((new - old - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_alone_shrinks_toward_zero() {
        let mut s = store_with(&[2.0, -3.0]);
        set_grad(&mut s, &[0.0, 0.0]);
        let mut st = OptimizerState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default(), 1e-3).unwrap();
        let v = values(&s);
        assert!(v[0] < 2.0 && v[0] > 0.0);
        assert!(v[1] > -3.0 && v[1] < 0.0);
    }

    #[test]
    fn matches_reference_on_quadratic() {
        // f(p) = Σ a_i (p_i - c_i)^2, written out with plain vectors.
        let a = [0.5, 1.0, 2.0, 0.1, 3.0];
        let c = [1.0, -1.0, 0.5, 2.0, -0.3];
        let p0 = [0.0, 0.2, -0.4, 0.9, 0.1];
        let grad = |p: &[f64]| -> Vec<f64> { (0..5).map(|i| 2.0 * a[i] * (p[i] - c[i])).collect() };
        let lr = 0.05;
        let cfg = AdamConfig::default();

        let mut rp = p0.to_vec();
        let mut m = [0.0; 5];
        let mut v = [0.0; 5];
        for t in 1..=10 {
            let mut g = grad(&rp);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 {
                g.iter_mut().for_each(|x| *x /= norm);
            }
            for i in 0..5 {
                let gi = g[i] + 1e-6 * rp[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                rp[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }

        let mut s = store_with(&p0);
        let mut st = OptimizerState::new(&s);
        for _ in 0..10 {
            let g = grad(&values(&s));
            set_grad(&mut s, &g);
            adam_step(&mut s, &mut st, &cfg, lr).unwrap();
        }
        for (x, y) in values(&s).iter().zip(&rp) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert_eq!(st.step, 10);
    }

    #[test]
    fn clipping_bounds_and_preserves_small() {
        let mut s = store_with(&[0.0; 3]);
        set_grad(&mut s, &[3.0, 4.0, 0.0]);
        let n = clip_grad_norm(&mut s, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert!(grad_norm(&s) <= 1.0 + 1e-6);

        let small = [0.1, -0.2, 0.3];
        set_grad(&mut s, &small);
        clip_grad_norm(&mut s, 1.0).unwrap();
        let g: Vec<f64> = s.find("p").unwrap().grad.as_ref().unwrap().iter().copied().collect();
        assert_eq!(g, small);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store_with(&[1.0]);
        set_grad(&mut s, &[f64::NAN]);
        let mut st = OptimizerState::new(&s);
        let err = adam_step(&mut s, &mut st, &AdamConfig::default(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(values(&s), vec![1.0]);
    }
}

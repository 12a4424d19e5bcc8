//! Adam and RMSProp over explicit parameter lists, plus global-norm clipping.
//!
//! State buffers are allocated against a parameter list at construction and
//! every subsequent step must present tensors of the same shapes in the same
//! order. A parameter with no accumulated gradient is treated as having zero
//! gradient: Adam's moments still decay, but with zero moments a zero-grad
//! step leaves the parameter exactly unchanged.

use super::{elem, Element, Tensor, TensorError};

fn check_shapes<T: Element>(
    op: &'static str,
    params: &[Tensor<T>],
    bufs: &[Vec<T>],
) -> Result<(), TensorError> {
    if params.len() != bufs.len() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{} params but state for {}", params.len(), bufs.len()),
        });
    }
    for (p, b) in params.iter().zip(bufs) {
        if p.numel() != b.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!(
                    "param of shape {:?} does not match state buffer of length {}",
                    p.shape(),
                    b.len()
                ),
            });
        }
    }
    Ok(())
}

/// Adam with bias correction.
pub struct AdamState<T: Element> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>], lr: T, beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<(), TensorError> {
        check_shapes("adam.step", params, &self.m)?;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = T::one() - elem::<T>(self.beta1.to_f64_exact().powf(t));
        let bc2 = T::one() - elem::<T>(self.beta2.to_f64_exact().powf(t));
        for (i, p) in params.iter().enumerate() {
            let g = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let gz; // borrow either the real gradient or a shared zero view
            let gs: &[T] = match &g {
                Some(g) => g,
                None => {
                    gz = vec![T::zero(); m.len()];
                    &gz
                }
            };
            let mut pv = p.value_mut();
            for j in 0..m.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gs[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gs[j] * gs[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pv[j] = pv[j] - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// (moments, step counter) for checkpointing.
    pub fn state(&self) -> (&[Vec<T>], &[Vec<T>], u64) {
        (&self.m, &self.v, self.step)
    }

    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) -> Result<(), TensorError> {
        if m.len() != self.m.len()
            || v.len() != self.v.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.len() != b.len())
            || v.iter().zip(&self.v).any(|(a, b)| a.len() != b.len())
        {
            return Err(TensorError::Invalid {
                op: "adam.restore",
                msg: "restored moment buffers do not match parameter shapes".into(),
            });
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

/// RMSProp (decaying mean-square scaling, no momentum).
pub struct RmsPropState<T: Element> {
    lr: T,
    decay: T,
    eps: T,
    step: u64,
    v: Vec<Vec<T>>,
}

impl<T: Element> RmsPropState<T> {
    pub fn new(params: &[Tensor<T>], lr: T, decay: T, eps: T) -> Self {
        RmsPropState {
            lr,
            decay,
            eps,
            step: 0,
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<(), TensorError> {
        check_shapes("rmsprop.step", params, &self.v)?;
        self.step += 1;
        for (i, p) in params.iter().enumerate() {
            let g = p.grad();
            let v = &mut self.v[i];
            let gz;
            let gs: &[T] = match &g {
                Some(g) => g,
                None => {
                    gz = vec![T::zero(); v.len()];
                    &gz
                }
            };
            let mut pv = p.value_mut();
            for j in 0..v.len() {
                v[j] = self.decay * v[j] + (T::one() - self.decay) * gs[j] * gs[j];
                pv[j] = pv[j] - self.lr * gs[j] / (v[j].sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn state(&self) -> (&[Vec<T>], u64) {
        (&self.v, self.step)
    }

    pub fn restore(&mut self, v: Vec<Vec<T>>, step: u64) -> Result<(), TensorError> {
        if v.len() != self.v.len() || v.iter().zip(&self.v).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::Invalid {
                op: "rmsprop.restore",
                msg: "restored buffers do not match parameter shapes".into(),
            });
        }
        self.v = v;
        self.step = step;
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &[Tensor<T>], max_norm: T) -> T {
    let mut sq = T::zero();
    for p in params {
        if let Some(g) = p.grad() {
            for &x in &g {
                sq = sq + x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for p in params {
            if p.grad().is_some() {
                for g in p.grad_mut().iter_mut() {
                    *g = *g * scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::super::backward;
    use super::*;

    /// First Adam step moves each coordinate by lr·g/(|g|+ε') up to bias
    /// correction; with full correction at t=1 the update is exactly
    /// lr·g/(√(g²)+ε̂) with ε̂ = ε/√(1−β₂): sign(g)·lr for ε → 0.
    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let p = Tensor::param(vec![1.0f64, -2.0], &[2]);
        let mut adam = AdamState::new(std::slice::from_ref(&p), 0.1, 0.9, 0.999, 0.0);
        let loss = p.mul(&Tensor::constant(vec![3.0, -5.0], &[2])).unwrap().sum_all();
        backward(&loss).unwrap(); // grads: [3, -5]
        adam.step(std::slice::from_ref(&p)).unwrap();
        let v = p.to_vec();
        assert!((v[0] - (1.0 - 0.1)).abs() < 1e-12);
        assert!((v[1] - (-2.0 + 0.1)).abs() < 1e-12);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_grad_step_keeps_params() {
        let p = Tensor::param(vec![1.0f64, 2.0], &[2]);
        let mut adam = AdamState::new(std::slice::from_ref(&p), 0.1, 0.9, 0.999, 1e-8);
        adam.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn rmsprop_first_step_matches_closed_form() {
        // v₁ = (1−α)g², Δ = lr·g/(√v₁+ε) = lr·g/(√(1−α)·|g|+ε).
        let p = Tensor::param(vec![2.0f64], &[1]);
        let mut rp = RmsPropState::new(std::slice::from_ref(&p), 0.5, 0.99, 0.0);
        let loss = p.scale_const(4.0).sum_all();
        backward(&loss).unwrap(); // grad 4
        rp.step(std::slice::from_ref(&p)).unwrap();
        let expect = 2.0 - 0.5 * 4.0 / ((0.01f64).sqrt() * 4.0);
        assert!((p.to_vec()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn optimizer_rejects_mismatched_params() {
        let p = Tensor::param(vec![0.0f64; 4], &[2, 2]);
        let q = Tensor::param(vec![0.0f64; 6], &[2, 3]);
        let mut adam = AdamState::new(&[p], 0.1, 0.9, 0.999, 1e-8);
        assert!(adam.step(&[q]).is_err());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let p = Tensor::param(vec![0.0f64, 0.0], &[2]);
        let loss = p
            .mul(&Tensor::constant(vec![3.0, 4.0], &[2]))
            .unwrap()
            .sum_all();
        backward(&loss).unwrap(); // grad (3,4), norm 5
        let norm = clip_grad_norm(std::slice::from_ref(&p), 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = p.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
        // Under the cap: untouched.
        let before = p.grad().unwrap();
        let norm2 = clip_grad_norm(std::slice::from_ref(&p), 10.0);
        assert!((norm2 - 1.0).abs() < 1e-9);
        assert_eq!(p.grad().unwrap(), before);
    }
}

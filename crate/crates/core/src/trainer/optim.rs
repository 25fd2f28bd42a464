use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::AlifuseParams;
use crate::tensor::Tensor;

/// Adam moments for every parameter tensor and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(params: &AlifuseParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState { t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, params: &AlifuseParams) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((p, m), v)| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// One AdamW update: decoupled decay `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step. Nothing is modified if any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut AlifuseParams,
    grads: &[Tensor],
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::dim("gradients or optimizer state do not match the parameters"));
    }
    for (g, name) in grads.iter().zip(params.names()) {
        if g.shape() != params.by_name(name).expect("own name").shape() {
            return Err(Error::dim(format!("gradient shape mismatch for {name}")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    let clip = match cfg.grad_clip {
        Some(max) => {
            let n = grad_norm(grads);
            if n > max {
                max / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let [b1, b2] = cfg.betas;
    let t = state.t + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let (lr, wd, eps) = (cfg.lr, cfg.weight_decay, cfg.eps);
    let mut updated: Vec<Tensor> = params.tensors().to_vec();
    let mut m_new = state.m.clone();
    let mut v_new = state.v.clone();
    for (((p, g), m), v) in updated.iter_mut().zip(grads).zip(&mut m_new).zip(&mut v_new) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i] * clip;
            p[i] -= lr * wd * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    if let Some(i) = updated.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("update made {} non-finite", params.names()[i])));
    }
    params.tensors_mut().clone_from_slice(&updated);
    state.m = m_new;
    state.v = v_new;
    state.t = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> AlifuseParams {
        let c = ModelConfig {
            d_model: 4,
            n_heads: 1,
            n_enc_layers: 0,
            n_dec_layers: 0,
            patch_size: 1,
            volume_side: 1,
            vocab_size: 5,
            max_len: 2,
            n_classes: 2,
            fusion_hidden: 2,
            ..ModelConfig::desk()
        };
        AlifuseParams::init(&c, 0).unwrap()
    }

    fn fill(p: &AlifuseParams, x: f64) -> Vec<Tensor> {
        p.tensors().iter().map(|t| Tensor::full(t.shape(), x)).collect()
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = OptimState::new(&p);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let g = fill(&p, 0.0);
        adamw_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p.tensors(), before.tensors());
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = tiny();
        for t in p.tensors_mut() {
            *t = Tensor::full(t.shape(), 1.0);
        }
        let mut s = OptimState::new(&p);
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, ..TrainConfig::default() };
        let g = fill(&p, 1.0);
        adamw_step(&mut p, &g, &mut s, &cfg).unwrap();
        // m̂ = v̂ = 1 after one step, so the update is lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        for t in p.tensors() {
            assert!(t.data().iter().all(|&x| (x - want).abs() < 1e-15));
        }
        assert!((want - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_alone_shrinks() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = OptimState::new(&p);
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.5, ..TrainConfig::default() };
        let g = fill(&p, 0.0);
        adamw_step(&mut p, &g, &mut s, &cfg).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y - 0.1 * 0.5 * y);
            }
        }
    }

    #[test]
    fn non_finite_gradient_leaves_state() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = OptimState::new(&p);
        let mut g = fill(&p, 0.1);
        g[3].data_mut()[0] = f64::NAN;
        let r = adamw_step(&mut p, &g, &mut s, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(p.tensors(), before.tensors());
        assert_eq!(s, OptimState::new(&p));
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut a = tiny();
        let mut b = a.clone();
        let cfg = TrainConfig { grad_clip: Some(1.0), weight_decay: 0.0, ..TrainConfig::default() };
        let (mut sa, mut sb) = (OptimState::new(&a), OptimState::new(&b));
        let g = fill(&a, 10.0);
        adamw_step(&mut a, &g, &mut sa, &cfg).unwrap();
        let g = fill(&b, 1000.0);
        adamw_step(&mut b, &g, &mut sb, &cfg).unwrap();
        for (x, y) in sa.m.iter().zip(&sb.m) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}

use super::{NetError, NetParams, Result};

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: NetParams,
    pub v: NetParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(params: &NetParams, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness before any
/// state is touched.
pub fn adam_step(params: &mut NetParams, grads: &NetParams, opt: &mut OptState) -> Result<()> {
    let mut flat = Vec::new();
    let mut bad = None;
    grads.visit(|name, t| {
        if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
        flat.push(t.to_vec());
    });
    if let Some(name) = bad {
        return Err(NetError::NonFiniteGradient(name));
    }
    let mut shapes = Vec::new();
    params.visit(|_, t| shapes.push(t.len()));
    if shapes != flat.iter().map(Vec::len).collect::<Vec<_>>() {
        return Err(NetError::ShapeMismatch("gradient does not match parameters".into()));
    }

    opt.step += 1;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let (lr, eps) = (opt.lr, opt.eps);
    let p = params.tensors_mut();
    let m = opt.m.tensors_mut();
    let v = opt.v.tensors_mut();
    for ((((_, p), (_, m)), (_, v)), g) in p.into_iter().zip(m).zip(v).zip(&flat) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.version += 1;
    Ok(())
}

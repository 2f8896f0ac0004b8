//! SGD, AdaDelta and Adam. Adam skips any update whose gradient contains a
//! non-finite entry; the other two refuse such gradients with an error.

use crate::error::{NmtError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdaDelta,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdaDelta => "adadelta",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adadelta" => Ok(OptimizerKind::AdaDelta),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(NmtError::Parse(format!("unknown optimizer `{other}` (sgd, adadelta, adam)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaDelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Running averages of g² and Δθ².
    pub eg2: Vec<Tensor>,
    pub edx2: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of applied updates.
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    AdaDelta(AdaDelta),
    Adam(Adam),
}

fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

fn check_shapes(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NmtError::shape("optimizer", format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NmtError::shape("optimizer", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adadelta(params: &[Tensor], lr: f64) -> Self {
        Optimizer::AdaDelta(AdaDelta {
            lr,
            rho: 0.95,
            eps: 1e-6,
            eg2: zeros_like(params),
            edx2: zeros_like(params),
        })
    }

    pub fn adam(params: &[Tensor], lr: f64) -> Self {
        Optimizer::Adam(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros_like(params),
            v: zeros_like(params),
            t: 0,
        })
    }

    pub fn new(kind: OptimizerKind, params: &[Tensor], lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(lr),
            OptimizerKind::AdaDelta => Optimizer::adadelta(params, lr),
            OptimizerKind::Adam => Optimizer::adam(params, lr),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::AdaDelta(_) => OptimizerKind::AdaDelta,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Applies one update. Returns `false` when Adam skipped the update.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<bool> {
        check_shapes(params, grads)?;
        match self {
            Optimizer::Sgd { lr } => {
                if !all_finite(grads) {
                    return Err(NmtError::NonFinite("gradient under sgd".into()));
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= *lr * d;
                    }
                }
                Ok(true)
            }
            Optimizer::AdaDelta(s) => {
                if !all_finite(grads) {
                    return Err(NmtError::NonFinite("gradient under adadelta".into()));
                }
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let eg2 = s.eg2[k].data_mut();
                    let edx2 = s.edx2[k].data_mut();
                    for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        eg2[i] = s.rho * eg2[i] + (1.0 - s.rho) * d * d;
                        let dx = -((edx2[i] + s.eps).sqrt() / (eg2[i] + s.eps).sqrt()) * d;
                        edx2[i] = s.rho * edx2[i] + (1.0 - s.rho) * dx * dx;
                        *x += s.lr * dx;
                    }
                }
                Ok(true)
            }
            Optimizer::Adam(s) => {
                if !all_finite(grads) {
                    return Ok(false);
                }
                s.t += 1;
                let t = s.t as i32;
                let c1 = 1.0 - s.beta1.powi(t);
                let c2 = 1.0 - s.beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = s.m[k].data_mut();
                    let v = s.v[k].data_mut();
                    for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * d;
                        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * d * d;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        *x -= s.lr * mh / (vh.sqrt() + s.eps);
                    }
                }
                Ok(true)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_examples() {
        let mut p = one(1.0);
        Optimizer::sgd(0.1).step(&mut p, &one(2.0)).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
        let mut q = one(1.0);
        Optimizer::sgd(0.1).step(&mut q, &one(0.0)).unwrap();
        assert_eq!(q[0].item(), 1.0);
        // two steps equal one step with the summed gradient
        let (mut a, mut b) = (one(0.3), one(0.3));
        let mut o = Optimizer::sgd(0.05);
        o.step(&mut a, &one(1.5)).unwrap();
        o.step(&mut a, &one(-0.5)).unwrap();
        o.step(&mut b, &one(1.0)).unwrap();
        assert!((a[0].item() - b[0].item()).abs() < 1e-15);
        assert!(o.step(&mut a, &one(f64::NAN)).is_err());
    }

    #[test]
    fn adadelta_first_step() {
        let mut p = one(0.0);
        let mut o = Optimizer::adadelta(&p, 1.0);
        o.step(&mut p, &one(1.0)).unwrap();
        let want = -(1e-6f64).sqrt() / (0.05f64 + 1e-6).sqrt();
        assert!((p[0].item() - want).abs() < 1e-15);
        assert!((p[0].item() + 4.4720e-3).abs() < 1e-6);
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulators() {
        let mut p = one(0.5);
        let mut o = Optimizer::adadelta(&p, 1.0);
        o.step(&mut p, &one(1.0)).unwrap();
        let before = p[0].item();
        let Optimizer::AdaDelta(s0) = o.clone() else { unreachable!() };
        o.step(&mut p, &one(0.0)).unwrap();
        let Optimizer::AdaDelta(s1) = &o else { unreachable!() };
        assert_eq!(p[0].item(), before);
        assert!((s1.eg2[0].item() - 0.95 * s0.eg2[0].item()).abs() < 1e-18);
        assert!((s1.edx2[0].item() - 0.95 * s0.edx2[0].item()).abs() < 1e-18);
    }

    #[test]
    fn adadelta_scale_invariance() {
        let step = |c: f64| {
            let mut p = one(0.0);
            let mut o = Optimizer::adadelta(&p, 1.0);
            if let Optimizer::AdaDelta(s) = &mut o {
                s.eps = 1e-12;
            }
            o.step(&mut p, &one(0.7 * c)).unwrap();
            p[0].item().abs()
        };
        let (a, b) = (step(1.0), step(10.0));
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
    }

    #[test]
    fn adam_examples() {
        let mut p = one(2.0);
        let mut o = Optimizer::adam(&p, 0.01);
        assert!(o.step(&mut p, &one(0.0)).unwrap());
        assert_eq!(p[0].item(), 2.0);

        let mut p = one(2.0);
        let mut o = Optimizer::adam(&p, 0.01);
        o.step(&mut p, &one(-3.0)).unwrap();
        assert!((p[0].item() - 2.01).abs() < 1e-9);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut p = vec![Tensor::row(vec![1.0, 2.0]).unwrap()];
        let mut o = Optimizer::adam(&p, 0.01);
        o.step(&mut p, &[Tensor::row(vec![0.5, -0.5]).unwrap()]).unwrap();
        let (p0, o0) = (p.clone(), o.clone());
        let applied = o.step(&mut p, &[Tensor::row(vec![f64::NAN, 1.0]).unwrap()]).unwrap();
        assert!(!applied);
        assert_eq!(p, p0);
        assert_eq!(o, o0);
        let Optimizer::Adam(s) = &o else { unreachable!() };
        assert_eq!(s.t, 1);
        assert!(o.step(&mut p, &[Tensor::row(vec![0.5, -0.5]).unwrap()]).unwrap());
        let Optimizer::Adam(s) = &o else { unreachable!() };
        assert_eq!(s.t, 2);
    }

    #[test]
    fn all_optimizers_descend_a_bowl() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdaDelta, OptimizerKind::Adam] {
            let mut p = vec![Tensor::row(vec![1.0, -2.0, 0.5]).unwrap()];
            let lr = if kind == OptimizerKind::AdaDelta { 1.0 } else { 0.01 };
            let mut o = Optimizer::new(kind, &p, lr);
            let loss = |p: &[Tensor]| p[0].data().iter().map(|v| 0.5 * v * v).sum::<f64>();
            let mut prev = loss(&p);
            for _ in 0..50 {
                let g = p.clone();
                o.step(&mut p, &g).unwrap();
                let l = loss(&p);
                assert!(l < prev, "{kind:?}");
                prev = l;
            }
        }
    }
}

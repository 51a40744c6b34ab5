use serde::{Deserialize, Serialize};

use super::layers::{Param, Visit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain SGD with momentum 0.9.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(crate::Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// First/second moment state, one slot per parameter tensor in visit order.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Visit) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps, lr, kind) = (self.beta1, self.beta2, self.eps, self.lr, self.kind);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut slot = 0;
        model.visit_params("", &mut |_, p: &mut Param| {
            if m_all.len() <= slot {
                m_all.push(vec![0.0; p.value.len()]);
                v_all.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut m_all[slot], &mut v_all[slot]);
            match kind {
                OptimizerKind::Adam => {
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..p.value.len() {
                        m[i] = 0.9 * m[i] + p.grad[i];
                        p.value[i] -= lr * m[i];
                    }
                }
            }
            slot += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Param);
    impl Visit for Quad {
        fn visit_params(&mut self, _p: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f("x".into(), &mut self.0);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut q = Quad(Param::new(vec![3.0, -2.0]));
            let mut opt = Optimizer::new(kind, 0.05);
            for _ in 0..500 {
                q.0.grad = q.0.value.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut q);
            }
            assert!(q.0.value.iter().all(|x| x.abs() < 0.05), "{kind:?}: {:?}", q.0.value);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut q = Quad(Param::new(vec![1.5]));
        q.0.grad = vec![10.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
        opt.step(&mut q);
        assert_eq!(q.0.value, vec![1.5]);
    }
}

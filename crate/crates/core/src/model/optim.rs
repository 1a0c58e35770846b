use mtuc_tensor::ParamSet;

/// SGD with classical momentum: v = m v + g; p -= lr v.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// Applies and clears the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        let ids: Vec<_> = params.ids().collect();
        for (id, vel) in ids.into_iter().zip(&mut self.velocity) {
            let t = params.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
            t.zero_grad();
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for ((id, m), v) in ids.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let t = params.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((p, m), v), g) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            t.zero_grad();
        }
    }
}

use super::ModelError;

/// Adam moments and hyper-parameters for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update. Nothing is modified if the update
    /// would produce a non-finite parameter.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<(), ModelError> {
        if params.len() != grads.len() || self.m.len() != params.len() {
            return Err(ModelError::LengthMismatch { params: params.len(), grads: grads.len() });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite { what: "gradient", index });
        }
        let t = self.t + 1;
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        let mut next = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = f64::from(grads[i]);
            let m = self.beta1 * f64::from(self.m[i]) + (1.0 - self.beta1) * g;
            let v = self.beta2 * f64::from(self.v[i]) + (1.0 - self.beta2) * g * g;
            let p = f64::from(params[i]) - self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            if !p.is_finite() || !(p as f32).is_finite() {
                return Err(ModelError::NonFinite { what: "parameter update", index: i });
            }
            next.push((m as f32, v as f32, p as f32));
        }
        for (i, (m, v, p)) in next.into_iter().enumerate() {
            self.m[i] = m;
            self.v[i] = v;
            params[i] = p;
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let mut s = AdamState::new(1, 0.01);
        let mut p = vec![0.0f32];
        s.step(&mut p, &[1.0]).unwrap();
        let want = -0.01 / (1.0 + 1e-8);
        assert!((f64::from(p[0]) - want).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let mut s = AdamState::new(1, 0.01);
        let mut p = vec![0.0f32];
        for _ in 0..5 {
            s.step(&mut p, &[1.0]).unwrap();
        }
        assert!((f64::from(p[0]) + 0.05).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = AdamState::new(2, 0.01);
        let mut p = vec![0.0f32; 2];
        assert!(s.step(&mut p, &[1.0]).is_err());
        assert!(s.step(&mut p, &[f32::NAN, 0.0]).is_err());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut s = AdamState::new(4, 0.01);
            let mut p = vec![0.3f32, -0.1, 2.0, 0.0];
            for k in 0..20 {
                let g: Vec<f32> = p.iter().enumerate().map(|(i, x)| x * (i as f32 + 1.0) - k as f32 * 0.01).collect();
                s.step(&mut p, &g).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}

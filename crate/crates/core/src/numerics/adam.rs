use super::{Matrix, NumericsError, Scalar};

/// Bias-corrected Adam with one pair of moment accumulators per parameter matrix.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`, with the usual 0.9 / 0.999 / 1e-8 constants.
    pub fn new(lr: T, params: &[Matrix<T>]) -> Self {
        Self::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8), params)
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T, params: &[Matrix<T>]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.second
    }

    /// Applies one update. A non-finite gradient leaves parameters, moments and
    /// the step counter untouched and is reported as an error.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) -> Result<(), NumericsError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NumericsError::ParamCount {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != self.first[i].shape() {
                return Err(NumericsError::ParamShape {
                    name: format!("#{i}"),
                    expected: self.first[i].shape(),
                    got: if p.shape() != self.first[i].shape() { p.shape() } else { g.shape() },
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { index: i });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

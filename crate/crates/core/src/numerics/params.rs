use super::{Matrix, NumericsError, Scalar};

/// An ordered list of named parameter matrices belonging to one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    mats: Vec<Matrix<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            mats: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix<T>) {
        self.names.push(name.into());
        self.mats.push(m);
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn mats(&self) -> &[Matrix<T>] {
        &self.mats
    }

    pub fn mats_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.mats
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.mats[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.mats)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(Matrix::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> Result<(), NumericsError> {
        if self.len() != other.len() {
            return Err(NumericsError::ParamCount {
                expected: self.len(),
                got: other.len(),
            });
        }
        for ((name, a), b) in self.iter().zip(other.mats()) {
            if a.shape() != b.shape() {
                return Err(NumericsError::ParamShape {
                    name: name.to_string(),
                    expected: a.shape(),
                    got: b.shape(),
                });
            }
        }
        Ok(())
    }

    /// `self ← tau·main + (1 − tau)·self`, elementwise.
    pub fn soft_update_from(&mut self, main: &Self, tau: T) -> Result<(), NumericsError> {
        self.same_layout(main)?;
        let keep = T::one() - tau;
        for (t, m) in self.mats.iter_mut().zip(main.mats()) {
            for (tv, &mv) in t.data_mut().iter_mut().zip(m.data()) {
                *tv = tau * mv + keep * *tv;
            }
        }
        Ok(())
    }

    /// Prefixes every name, e.g. `critic1_` + `W1`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            names: self.names.iter().map(|n| format!("{prefix}{n}")).collect(),
            mats: self.mats.clone(),
        }
    }

    /// Replaces all matrices, keeping names, after checking the layout.
    pub fn assign(&mut self, mats: Vec<Matrix<T>>) -> Result<(), NumericsError> {
        let other = Self {
            names: self.names.clone(),
            mats,
        };
        self.same_layout(&other)?;
        self.mats = other.mats;
        Ok(())
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

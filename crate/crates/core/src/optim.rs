//! Plain SGD and Adam over the sparse rows of a [`GradientSet`].
//!
//! Adam keeps first and second moments per table entry. Only rows present in
//! the gradient are touched in a step; the bias correction uses the global
//! step count.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::risk::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimiser {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimiser {
    pub const ADAM: Optimiser = Optimiser::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

impl Default for Optimiser {
    fn default() -> Self {
        Self::ADAM
    }
}

impl fmt::Display for Optimiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Optimiser::Sgd => f.write_str("sgd"),
            Optimiser::Adam { .. } => f.write_str("adam"),
        }
    }
}

impl FromStr for Optimiser {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimiser::Sgd),
            "adam" => Ok(Self::ADAM),
            other => Err(Error::Argument(format!(
                "unknown optimiser {other:?}, expected sgd or adam"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Moments {
    fn zeros(rows: usize, d: usize) -> Self {
        Self {
            m: Array2::zeros((rows, d)),
            v: Array2::zeros((rows, d)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimiserState {
    optimiser: Optimiser,
    step: u64,
    users: Option<Moments>,
    items: Option<Moments>,
}

impl OptimiserState {
    pub fn new(optimiser: Optimiser, model: &EmbeddingModel) -> Self {
        let (users, items) = match optimiser {
            Optimiser::Sgd => (None, None),
            Optimiser::Adam { .. } => (
                Some(Moments::zeros(model.n_users(), model.dim())),
                Some(Moments::zeros(model.n_items(), model.dim())),
            ),
        };
        Self {
            optimiser,
            step: 0,
            users,
            items,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step of size `lr` to the rows named in `grad`.
    pub fn apply(&mut self, model: &mut EmbeddingModel, grad: &GradientSet, lr: f64) -> Result<()> {
        let d = model.dim();
        if let Some(g) = grad
            .users
            .values()
            .chain(grad.items.values())
            .find(|g| g.len() != d)
        {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: g.len(),
            });
        }
        self.step += 1;
        let step = self.step;
        let optimiser = self.optimiser;
        let (user_tab, item_tab) = model.tables_mut();
        for (tab, rows, moments) in [
            (user_tab, &grad.users, self.users.as_mut()),
            (item_tab, &grad.items, self.items.as_mut()),
        ] {
            match (optimiser, moments) {
                (Optimiser::Sgd, _) => {
                    for (&id, g) in rows {
                        tab.row_mut(id as usize).scaled_add(-lr, g);
                    }
                }
                (Optimiser::Adam { beta1, beta2, eps }, Some(mom)) => {
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    for (&id, g) in rows {
                        let r = id as usize;
                        adam_row(
                            tab.row_mut(r),
                            mom.m.row_mut(r),
                            mom.v.row_mut(r),
                            g.view(),
                            AdamStep {
                                lr,
                                beta1,
                                beta2,
                                eps,
                                bc1,
                                bc2,
                            },
                        );
                    }
                }
                (Optimiser::Adam { .. }, None) => {
                    return Err(Error::Contract("Adam state missing moments".into()))
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct AdamStep {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

fn adam_row(
    mut param: ArrayViewMut1<f64>,
    mut m: ArrayViewMut1<f64>,
    mut v: ArrayViewMut1<f64>,
    g: ArrayView1<f64>,
    s: AdamStep,
) {
    for k in 0..g.len() {
        m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
        v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
        let m_hat = m[k] / s.bc1;
        let v_hat = v[k] / s.bc2;
        param[k] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Backbone;
    use ndarray::array;

    fn model() -> EmbeddingModel {
        EmbeddingModel::from_tables(
            array![[1.0, 2.0]],
            array![[0.5, -0.5], [3.0, 0.0]],
            Backbone::Mf,
            0,
            f64::INFINITY,
        )
        .unwrap()
    }

    fn grad() -> GradientSet {
        let mut g = GradientSet::default();
        g.users.insert(0, array![0.5, -1.0]);
        g.items.insert(1, array![2.0, 4.0]);
        g
    }

    #[test]
    fn sgd_step() {
        let mut m = model();
        let mut st = OptimiserState::new(Optimiser::Sgd, &m);
        st.apply(&mut m, &grad(), 0.1).unwrap();
        assert_eq!(m.user_emb(), array![[0.95, 2.1]]);
        assert_eq!(m.item_emb(), array![[0.5, -0.5], [2.8, -0.4]]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut m = model();
        let mut st = OptimiserState::new(Optimiser::ADAM, &m);
        st.apply(&mut m, &grad(), 0.01).unwrap();
        // m_hat / sqrt(v_hat) = sign(g) on the first step.
        assert!((m.user_emb()[[0, 0]] - 0.99).abs() < 1e-7);
        assert!((m.user_emb()[[0, 1]] - 2.01).abs() < 1e-7);
        assert_eq!(m.item_emb().row(0), array![0.5, -0.5]);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        for opt in [Optimiser::Sgd, Optimiser::ADAM] {
            let mut m = model();
            let before = (m.user_emb().to_owned(), m.item_emb().to_owned());
            let mut st = OptimiserState::new(opt, &m);
            st.apply(&mut m, &grad(), 0.0).unwrap();
            assert_eq!(m.user_emb(), before.0);
            assert_eq!(m.item_emb(), before.1);
        }
    }
}

//! Bias-corrected Adam with the usual defaults (beta1 0.9, beta2 0.999,
//! epsilon 1e-8).

use ndarray::{Array1, Array2, Array4};

use super::layers::{cast, Grads, Layer, LayerGrads, NetFloat};
use super::model::Model;
use super::NnError;

#[derive(Debug, Clone)]
pub enum MomentSlot<F> {
    Conv { mw: Array4<F>, vw: Array4<F>, mb: Array1<F>, vb: Array1<F> },
    Dense { mw: Array2<F>, vw: Array2<F>, mb: Array1<F>, vb: Array1<F> },
    None,
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub slots: Vec<MomentSlot<F>>,
}

impl<F: NetFloat> Adam<F> {
    pub fn new(model: &Model<F>) -> Self {
        let slots = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv(c) => MomentSlot::Conv {
                    mw: Array4::zeros(c.weights.dim()),
                    vw: Array4::zeros(c.weights.dim()),
                    mb: Array1::zeros(c.bias.dim()),
                    vb: Array1::zeros(c.bias.dim()),
                },
                Layer::Dense(d) => MomentSlot::Dense {
                    mw: Array2::zeros(d.weights.dim()),
                    vw: Array2::zeros(d.weights.dim()),
                    mb: Array1::zeros(d.bias.dim()),
                    vb: Array1::zeros(d.bias.dim()),
                },
                _ => MomentSlot::None,
            })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, slots }
    }

    /// One Adam update. Rejects non-finite gradients so divergence surfaces
    /// as an error instead of NaN weights.
    pub fn step(&mut self, model: &mut Model<F>, grads: &Grads<F>, lr: f64) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient { step: self.step });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = cast::<F>(self.beta1);
        let b2 = cast::<F>(self.beta2);
        let one_m_b1 = cast::<F>(1.0 - self.beta1);
        let one_m_b2 = cast::<F>(1.0 - self.beta2);
        let corr1 = cast::<F>(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = cast::<F>(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = cast::<F>(self.epsilon);
        let lr = cast::<F>(lr);

        macro_rules! update {
            ($w:expr, $m:expr, $v:expr, $g:expr) => {
                ndarray::Zip::from($w).and($m).and($v).and($g).for_each(|w, m, v, g| {
                    *m = b1 * *m + one_m_b1 * *g;
                    *v = b2 * *v + one_m_b2 * *g * *g;
                    let m_hat = *m * corr1;
                    let v_hat = *v * corr2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                });
            };
        }

        for ((layer, slot), grad) in
            model.layers.iter_mut().zip(self.slots.iter_mut()).zip(grads.layers.iter())
        {
            match (layer, slot, grad) {
                (
                    Layer::Conv(c),
                    MomentSlot::Conv { mw, vw, mb, vb },
                    LayerGrads::Conv { dw, db },
                ) => {
                    update!(&mut c.weights, mw, vw, dw);
                    update!(&mut c.bias, mb, vb, db);
                }
                (
                    Layer::Dense(d),
                    MomentSlot::Dense { mw, vw, mb, vb },
                    LayerGrads::Dense { dw, db },
                ) => {
                    update!(&mut d.weights, mw, vw, dw);
                    update!(&mut d.bias, mb, vb, db);
                }
                (_, MomentSlot::None, LayerGrads::None) => {}
                _ => panic!("optimizer state does not match model"),
            }
        }
        Ok(())
    }
}

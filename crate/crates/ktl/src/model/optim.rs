//! RMSprop with decoupled weight decay:
//!   s ← ρ·s + (1−ρ)·g²
//!   θ ← θ − lr·(g/(√s + ε) + wd·θ)
//! Defaults: ρ = 0.99, ε = 1e-8, wd = 1e-5.

use crate::error::{Error, Result};

use super::conv::ConvGrad;
use super::{Gradients, ModelParams, Section, ALL_SECTIONS};

pub const RMSPROP_DECAY: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 1e-5;

/// Running squared-gradient averages, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    backbone: Vec<ConvGrad>,
    detector_head: Vec<ConvGrad>,
    descriptor_head: Vec<ConvGrad>,
    stage2_head: Option<Vec<ConvGrad>>,
}

impl RmsPropState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let z = |ls: &[super::conv::ConvLayer]| {
            ls.iter().map(ConvGrad::zeros_like).collect::<Vec<_>>()
        };
        Self {
            backbone: z(&params.backbone),
            detector_head: z(&params.detector_head),
            descriptor_head: z(&params.descriptor_head),
            stage2_head: params.stage2_head.as_deref().map(z),
        }
    }

    /// Adds a zeroed Stage-2 slot when the head appears after warm start.
    pub fn ensure_stage2(&mut self, params: &ModelParams) {
        if self.stage2_head.is_none() {
            if let Some(h) = &params.stage2_head {
                self.stage2_head = Some(h.iter().map(ConvGrad::zeros_like).collect());
            }
        }
    }

    pub fn section(&self, s: Section) -> &[ConvGrad] {
        match s {
            Section::Backbone => &self.backbone,
            Section::DetectorHead => &self.detector_head,
            Section::DescriptorHead => &self.descriptor_head,
            Section::Stage2Head => self.stage2_head.as_deref().unwrap_or(&[]),
        }
    }

    pub fn section_mut(&mut self, s: Section) -> &mut [ConvGrad] {
        match s {
            Section::Backbone => &mut self.backbone,
            Section::DetectorHead => &mut self.detector_head,
            Section::DescriptorHead => &mut self.descriptor_head,
            Section::Stage2Head => match &mut self.stage2_head {
                Some(v) => v,
                None => &mut [],
            },
        }
    }

    pub fn quantize_f32(&mut self) {
        for &s in &ALL_SECTIONS {
            for g in self.section_mut(s) {
                for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

fn update_slice(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, wd: f64) {
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = RMSPROP_DECAY * *s + (1.0 - RMSPROP_DECAY) * g * g;
        *p -= lr * (g / (s.sqrt() + RMSPROP_EPS) + wd * *p);
    }
}

/// Applies one RMSprop update to the listed sections only; other sections
/// (parameters, state, and weight decay alike) are untouched.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut RmsPropState,
    lr: f64,
    weight_decay: f64,
    sections: &[Section],
) -> Result<()> {
    for &sec in sections {
        if !grads
            .section(sec)
            .iter()
            .all(|g| g.weight.iter().all(|v| v.is_finite()) && g.bias.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient for {sec:?}")));
        }
    }
    for &sec in sections {
        let n = params.section(sec).len();
        for i in 0..n {
            let g = grads.section(sec)[i].clone();
            let layer = &mut params.section_mut(sec)[i];
            let mut w = std::mem::take(&mut layer.weight);
            let mut b = std::mem::take(&mut layer.bias);
            {
                let st = &mut state.section_mut(sec)[i];
                update_slice(&mut w, &g.weight, &mut st.weight, lr, weight_decay);
                update_slice(&mut b, &g.bias, &mut st.bias, lr, weight_decay);
            }
            let layer = &mut params.section_mut(sec)[i];
            layer.weight = w;
            layer.bias = b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    #[test]
    fn zero_gradient_zero_state_shrinks_by_weight_decay() {
        let mut params = ModelParams::init(Dims::tiny(), 2);
        let before = params.flatten();
        let grads = Gradients::zeros_like(&params);
        let mut state = RmsPropState::zeros_like(&params);
        let lr = 2e-4;
        optimizer_step(&mut params, &grads, &mut state, lr, WEIGHT_DECAY, &ALL_SECTIONS).unwrap();
        let after = params.flatten();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b * (1.0 - lr * WEIGHT_DECAY)).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let mk = || {
            let mut params = ModelParams::init(Dims::tiny(), 4);
            let mut grads = Gradients::zeros_like(&params);
            grads.backbone[0].weight.iter_mut().enumerate().for_each(|(i, v)| {
                *v = (i as f64 * 0.01).sin();
            });
            let mut state = RmsPropState::zeros_like(&params);
            optimizer_step(&mut params, &grads, &mut state, 1e-3, WEIGHT_DECAY, &ALL_SECTIONS).unwrap();
            params.flatten()
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn scalar_recurrence_matches_hand_computation() {
        // Single scalar parameter, constant gradient over steps.
        let lr = 0.01;
        let g = 0.3;
        let mut p = 1.0f64;
        let mut s = 0.0f64;
        let mut p_ref = 1.0f64;
        let mut s_ref = 0.0f64;
        for _ in 0..10 {
            update_slice(
                std::slice::from_mut(&mut p),
                &[g],
                std::slice::from_mut(&mut s),
                lr,
                WEIGHT_DECAY,
            );
            s_ref = RMSPROP_DECAY * s_ref + (1.0 - RMSPROP_DECAY) * g * g;
            p_ref -= lr * (g / (s_ref.sqrt() + RMSPROP_EPS) + WEIGHT_DECAY * p_ref);
            assert!((p - p_ref).abs() < 1e-12);
            assert!((s - s_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = ModelParams::init(Dims::tiny(), 6);
        let mut grads = Gradients::zeros_like(&params);
        grads.backbone[0].weight[0] = f64::NAN;
        let mut state = RmsPropState::zeros_like(&params);
        assert!(optimizer_step(&mut params, &grads, &mut state, 1e-3, WEIGHT_DECAY, &ALL_SECTIONS).is_err());
    }

    #[test]
    fn masked_sections_untouched() {
        let mut params = ModelParams::init(Dims::tiny(), 8);
        let desc_before: Vec<f64> = params.descriptor_head[0].weight.clone();
        let mut grads = Gradients::zeros_like(&params);
        for g in &mut grads.descriptor_head {
            g.weight.iter_mut().for_each(|v| *v = 1.0);
        }
        for g in &mut grads.backbone {
            g.weight.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut state = RmsPropState::zeros_like(&params);
        optimizer_step(
            &mut params,
            &grads,
            &mut state,
            1e-3,
            WEIGHT_DECAY,
            &[Section::Backbone, Section::DetectorHead],
        )
        .unwrap();
        assert_eq!(params.descriptor_head[0].weight, desc_before);
    }
}

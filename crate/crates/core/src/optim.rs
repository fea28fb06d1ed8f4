use crate::layers::Param;
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Param<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .into_iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update. `params` and `grads` are aligned
    /// position by position with the moment buffers in `state`.
    pub fn step<T: Scalar>(
        &self,
        params: Vec<&mut Param<T>>,
        grads: &[&Param<T>],
        state: &mut AdamState<T>,
    ) {
        assert_eq!(params.len(), grads.len(), "param/grad groups");
        assert_eq!(params.len(), state.m.len(), "param/moment groups");
        let clip_scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data.iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        state.t += 1;
        let t = state.t as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.eps);
        let clip = T::from_f64(clip_scale);
        for (k, p) in params.into_iter().enumerate() {
            let g = &grads[k].data;
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            for i in 0..p.data.len() {
                let gi = if clip_scale < 1.0 { g[i] * clip } else { g[i] };
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let mh = m[i] * corr1;
                let vh = v[i] * corr2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

use super::{Heatmap, Method, MethodParams};
use crate::binviz::InputTensor;
use crate::error::Result;
use crate::nn::{FeatureMapGrad, FeatureMapModel};

/// Channel sum of gradient ⊙ activation at feature-map resolution. Signed.
pub fn hirescam_raw(fg: &FeatureMapGrad) -> Vec<f64> {
    let hw = fg.side * fg.side;
    let mut out = vec![0.0; hw];
    for ch in 0..fg.channels {
        let a = &fg.activations[ch * hw..(ch + 1) * hw];
        let g = &fg.gradient[ch * hw..(ch + 1) * hw];
        for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(g)) {
            *o += x * y;
        }
    }
    out
}

/// Nearest-neighbour upsampling of the raw map to `side`.
pub fn hirescam_from_grad(fg: &FeatureMapGrad, side: usize, class: usize) -> Result<Heatmap> {
    let small = hirescam_raw(fg);
    let fs = fg.side;
    let mut raw = Vec::with_capacity(side * side);
    for r in 0..side {
        let sr = r * fs / side;
        for c in 0..side {
            raw.push(small[sr * fs + c * fs / side]);
        }
    }
    Heatmap::new(Method::Hirescam, side, class, raw, MethodParams::Hirescam)
}

/// HiResCAM for `class` (pre-softmax score).
pub fn hirescam<M: FeatureMapModel + ?Sized>(model: &M, input: &InputTensor, class: usize) -> Result<Heatmap> {
    let fg = model.feature_map_grad(input, class)?;
    hirescam_from_grad(&fg, input.side, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_config, Batch, Classifier, Model};
    use crate::rng;
    use rand::Rng;

    /// Feature map is the input itself (one channel), head is linear with
    /// weights `w`, so the score gradient on A is `w`.
    struct LinearHead {
        w: Vec<f64>,
    }
    impl Classifier for LinearHead {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_side(&self) -> usize {
            4
        }
        fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.5, 0.5]; inputs.len()])
        }
    }
    impl FeatureMapModel for LinearHead {
        fn feature_map_grad(&self, input: &InputTensor, _class: usize) -> Result<FeatureMapGrad> {
            Ok(FeatureMapGrad {
                channels: 1,
                side: 4,
                activations: input.values.iter().map(|&v| v as f64).collect(),
                gradient: self.w.clone(),
            })
        }
    }

    #[test]
    fn linear_head_closed_form() {
        let w: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        let x = InputTensor {
            side: 4,
            values: (0..16).map(|i| (i % 5) as f32 * 0.25).collect(),
        };
        let h = hirescam(&LinearHead { w: w.clone() }, &x, 1).unwrap();
        for i in 0..16 {
            assert_eq!(h.raw[i], w[i] * x.values[i] as f64);
        }
        let zero = hirescam(&LinearHead { w }, &InputTensor::filled(4, 0.0), 1).unwrap();
        assert!(zero.raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampling_repeats_cells() {
        let fg = FeatureMapGrad {
            channels: 1,
            side: 2,
            activations: vec![1.0, 2.0, 3.0, 4.0],
            gradient: vec![1.0; 4],
        };
        let h = hirescam_from_grad(&fg, 4, 0).unwrap();
        assert_eq!(h.raw[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(h.raw[12..], [3.0, 3.0, 4.0, 4.0]);
    }

    // Sum over the raw map equals the directional derivative of the class
    // score along A, checked by central differences on the model head.
    #[test]
    fn map_sum_is_directional_derivative() {
        let m: Model<f64> = Model::new(tiny_config(3, 17)).unwrap();
        let mut r = rng::stream(2, "cam");
        let x = InputTensor {
            side: 16,
            values: (0..256).map(|_| r.random()).collect(),
        };
        let b = Batch::<f64>::from_inputs(std::slice::from_ref(&x), 16).unwrap();
        let trace = m.forward_eval(&b, true).unwrap();
        for class in 0..m.num_classes() {
            let fg = m.class_score_feature_grad(&trace, class).unwrap();
            let total: f64 = hirescam_raw(&fg).iter().sum();
            let t = 1e-6;
            let up: Vec<f64> = fg.activations.iter().map(|a| a * (1.0 + t)).collect();
            let dn: Vec<f64> = fg.activations.iter().map(|a| a * (1.0 - t)).collect();
            let fd = (m.logits_from_feature_map(&up)[class] - m.logits_from_feature_map(&dn)[class]) / (2.0 * t);
            assert!((total - fd).abs() <= 1e-3 * fd.abs().max(1e-9), "{total} vs {fd}");
        }
    }

    #[test]
    fn deterministic() {
        let m: Model<f32> = Model::new(tiny_config(3, 1)).unwrap();
        let x = InputTensor::filled(16, 0.4);
        assert_eq!(hirescam(&m, &x, 2).unwrap(), hirescam(&m, &x, 2).unwrap());
    }
}

use serde::{Deserialize, Serialize};

use super::{Heatmap, Method, MethodParams};
use crate::binviz::InputTensor;
use crate::error::{Error, Result};
use crate::nn::{argmax, Classifier};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionParams {
    pub window: usize,
    pub stride: usize,
    pub baseline: f32,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        OcclusionParams {
            window: 8,
            stride: 4,
            baseline: 0.0,
        }
    }
}

/// Window origins along one axis; the last window is pinned to the edge so
/// every pixel is covered.
fn origins(side: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=side - window).step_by(stride).collect();
    if *v.last().expect("non-empty") != side - window {
        v.push(side - window);
    }
    v
}

/// Drop in the predicted class's probability when each window is set to the
/// baseline, averaged per pixel over the windows covering it.
pub fn occlusion_map<M: Classifier + ?Sized>(model: &M, input: &InputTensor, p: &OcclusionParams) -> Result<Heatmap> {
    let side = input.side;
    if p.window > side {
        return Err(Error::WindowTooLarge {
            window: p.window,
            side,
        });
    }
    if p.window == 0 || p.stride == 0 {
        return Err(Error::InvalidConfig("occlusion window and stride must be positive".into()));
    }
    let clean = model.predict_proba(std::slice::from_ref(input))?.remove(0);
    let class = argmax(&clean);
    let ys = origins(side, p.window, p.stride);
    let mut variants = Vec::with_capacity(ys.len() * ys.len());
    let mut spots = Vec::with_capacity(ys.len() * ys.len());
    for &y in &ys {
        for &x in &ys {
            let mut v = input.clone();
            for r in y..y + p.window {
                v.values[r * side + x..r * side + x + p.window].fill(p.baseline);
            }
            variants.push(v);
            spots.push((y, x));
        }
    }
    let probs = model.predict_proba(&variants)?;
    let mut sum = vec![0.0f64; side * side];
    let mut count = vec![0u32; side * side];
    for ((y, x), pr) in spots.into_iter().zip(probs) {
        let score = clean[class] - pr[class];
        for r in y..y + p.window {
            for c in x..x + p.window {
                sum[r * side + c] += score;
                count[r * side + c] += 1;
            }
        }
    }
    let raw = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    Heatmap::new(Method::Occlusion, side, class, raw, MethodParams::Occlusion(*p))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl Classifier for Constant {
        fn num_classes(&self) -> usize {
            3
        }
        fn input_side(&self) -> usize {
            16
        }
        fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.2, 0.5, 0.3]; inputs.len()])
        }
    }

    /// Two-class logistic stub reading the mean of one pixel block.
    pub(crate) struct CellReader {
        pub side: usize,
        pub rows: std::ops::Range<usize>,
        pub cols: std::ops::Range<usize>,
    }
    impl Classifier for CellReader {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_side(&self) -> usize {
            self.side
        }
        fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|x| {
                    let mut s = 0.0;
                    for r in self.rows.clone() {
                        for c in self.cols.clone() {
                            s += x.values[r * self.side + c] as f64;
                        }
                    }
                    let p = 1.0 / (1.0 + (-(s - 1.0)).exp());
                    vec![1.0 - p, p]
                })
                .collect())
        }
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let h = occlusion_map(&Constant, &InputTensor::filled(16, 0.7), &OcclusionParams::default()).unwrap();
        assert!(h.raw.iter().all(|&v| v == 0.0));
        assert_eq!(h.target_class, 1);
    }

    #[test]
    fn full_window_is_one_occlusion() {
        let m = CellReader {
            side: 8,
            rows: 0..2,
            cols: 0..2,
        };
        let x = InputTensor::filled(8, 0.9);
        let p = OcclusionParams {
            window: 8,
            stride: 8,
            baseline: 0.0,
        };
        let h = occlusion_map(&m, &x, &p).unwrap();
        let clean = m.predict_proba(std::slice::from_ref(&x)).unwrap()[0][1];
        let black = m.predict_proba(&[InputTensor::filled(8, 0.0)]).unwrap()[0][1];
        assert!(h.raw.iter().all(|&v| (v - (clean - black)).abs() < 1e-12));
    }

    #[test]
    fn window_too_large() {
        let p = OcclusionParams {
            window: 17,
            ..Default::default()
        };
        assert!(matches!(
            occlusion_map(&Constant, &InputTensor::filled(16, 0.0), &p),
            Err(Error::WindowTooLarge { window: 17, side: 16 })
        ));
    }

    // Brute force: the stub only reads rows 8..12, cols 4..8, so every
    // window that misses the block scores 0 and the per-pixel mean peaks
    // exactly on it.
    #[test]
    fn stub_reading_one_cell_peaks_there() {
        let m = CellReader {
            side: 16,
            rows: 8..12,
            cols: 4..8,
        };
        let x = InputTensor::filled(16, 0.8);
        let p = OcclusionParams {
            window: 4,
            stride: 4,
            baseline: 0.0,
        };
        let h = occlusion_map(&m, &x, &p).unwrap();
        let max = h.raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for r in 0..16 {
            for c in 0..16 {
                let inside = (8..12).contains(&r) && (4..8).contains(&c);
                let v = h.raw[r * 16 + c];
                if inside {
                    assert_eq!(v, max);
                    assert!(v > 0.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn edge_windows_cover_everything() {
        assert_eq!(origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(origins(64, 8, 4).len(), 15);
    }
}

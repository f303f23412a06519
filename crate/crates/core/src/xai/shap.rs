use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Heatmap, Method, MethodParams, Segmentation};
use crate::binviz::InputTensor;
use crate::error::{Error, Result};
use crate::nn::{argmax, Classifier};
use crate::rng;

/// Largest segment count accepted for full enumeration.
pub const EXACT_SHAP_MAX: usize = 20;
/// Largest segment count accepted by the brute-force oracle.
pub const EXACT_ORACLE_MAX: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coalitions {
    All,
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapParams {
    /// Segments per side of the regular grid.
    pub grid: usize,
    pub coalitions: Coalitions,
    pub background: f32,
    pub seed: u64,
}

impl Default for ShapParams {
    fn default() -> Self {
        ShapParams {
            grid: 8,
            coalitions: Coalitions::Sampled(2048),
            background: 0.0,
            seed: 0,
        }
    }
}

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a single coalition of size `s` among `m`.
fn kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binom(m, s) * s as f64 * (m - s) as f64)
}

fn subsets_of_size(m: usize, s: usize, out: &mut Vec<Vec<bool>>) {
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        let mut z = vec![false; m];
        idx.iter().for_each(|&i| z[i] = true);
        out.push(z);
        // advance the rightmost index that still has room
        let mut i = s;
        while i > 0 && idx[i - 1] == m - s + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Weighted coalitions for the regression. Whole coalition sizes (paired
/// `s`, `m - s`) are enumerated smallest-first while the budget allows;
/// the remaining sizes are sampled in complementary pairs with equal
/// weights summing to their kernel mass.
fn plan(m: usize, coalitions: Coalitions, seed: u64) -> Vec<(Vec<bool>, f64)> {
    let mut out = Vec::new();
    let mut budget = match coalitions {
        Coalitions::All => usize::MAX,
        Coalitions::Sampled(n) => n,
    };
    let mut next = 1;
    while next <= m / 2 {
        let pair = if next == m - next { vec![next] } else { vec![next, m - next] };
        let count: f64 = pair.iter().map(|&s| binom(m, s)).sum();
        if count > budget as f64 {
            break;
        }
        for &s in &pair {
            let w = kernel_weight(m, s);
            let mut subs = Vec::new();
            subsets_of_size(m, s, &mut subs);
            out.extend(subs.into_iter().map(|z| (z, w)));
        }
        budget -= count as usize;
        next += 1;
    }
    let remaining: Vec<usize> = (next..=m - next).collect();
    if remaining.is_empty() || budget < 2 {
        return out;
    }
    let mass: Vec<f64> = remaining.iter().map(|&s| binom(m, s) * kernel_weight(m, s)).collect();
    let total: f64 = mass.iter().sum();
    let draws = budget / 2;
    let w = total / (2 * draws) as f64;
    let mut r = rng::stream(seed, "shap/coalitions");
    let mut merged: BTreeMap<Vec<bool>, f64> = BTreeMap::new();
    let mut order = Vec::new();
    for _ in 0..draws {
        let mut u = r.random::<f64>() * total;
        let mut s = *remaining.last().expect("non-empty");
        for (&size, &ms) in remaining.iter().zip(&mass) {
            if u < ms {
                s = size;
                break;
            }
            u -= ms;
        }
        let mut z = vec![false; m];
        sample(&mut r, m, s).into_iter().for_each(|i| z[i] = true);
        let comp: Vec<bool> = z.iter().map(|b| !b).collect();
        for c in [z, comp] {
            let e = merged.entry(c.clone()).or_insert_with(|| {
                order.push(c);
                0.0
            });
            *e += w;
        }
    }
    out.extend(order.into_iter().map(|z| {
        let w = merged[&z];
        (z, w)
    }));
    out
}

/// Solves `a x = b` (dense, symmetric positive semi-definite) by Gaussian
/// elimination with partial pivoting; a tiny ridge rescues singular systems.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, piv);
        b.swap(col, piv);
        if a[col][col].abs() < 1e-13 * scale {
            a[col][col] += 1e-10 * scale;
        }
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Kernel SHAP over an abstract game. `value` receives coalitions (true =
/// segment present) and returns their values; the first two requested are
/// always the empty and the full coalition.
pub fn kernel_shap_game(
    m: usize,
    coalitions: Coalitions,
    seed: u64,
    value: &mut dyn FnMut(&[Vec<bool>]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidConfig("kernel SHAP needs at least one segment".into()));
    }
    match coalitions {
        Coalitions::All if m > EXACT_SHAP_MAX => return Err(Error::TooManySegmentsForExact(m)),
        Coalitions::Sampled(n) if n < m + 2 => {
            return Err(Error::InvalidConfig(format!("{n} coalitions for {m} segments; need at least {}", m + 2)))
        }
        _ => {}
    }
    let planned = if m == 1 { Vec::new() } else { plan(m, coalitions, seed) };
    let mut batch = Vec::with_capacity(planned.len() + 2);
    batch.push(vec![false; m]);
    batch.push(vec![true; m]);
    batch.extend(planned.iter().map(|(z, _)| z.clone()));
    let v = value(&batch)?;
    if v.len() != batch.len() {
        return Err(Error::ShapeMismatch(format!("{} values for {} coalitions", v.len(), batch.len())));
    }
    let (v0, vf) = (v[0], v[1]);
    let gap = vf - v0;
    if m == 1 {
        return Ok(vec![gap]);
    }
    // The efficiency constraint eliminates the last segment's value.
    let n = m - 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    let mut x = vec![0.0; n];
    for ((z, w), &vz) in planned.iter().zip(&v[2..]) {
        let last = z[n] as u8 as f64;
        for i in 0..n {
            x[i] = z[i] as u8 as f64 - last;
        }
        let y = vz - v0 - last * gap;
        for i in 0..n {
            if x[i] == 0.0 {
                continue;
            }
            let wx = w * x[i];
            b[i] += wx * y;
            for j in 0..n {
                a[i][j] += wx * x[j];
            }
        }
    }
    let mut phi = solve(a, b);
    let rest: f64 = phi.iter().sum();
    phi.push(gap - rest);
    Ok(phi)
}

/// Per-segment Shapley values for the model's class probability, where
/// absent segments are set to `params.background`. `class` defaults to the
/// predicted class.
pub fn kernel_shap<M: Classifier + ?Sized>(
    model: &M,
    input: &InputTensor,
    seg: &Segmentation,
    params: &ShapParams,
    class: Option<usize>,
) -> Result<Heatmap> {
    if seg.side != input.side {
        return Err(Error::ShapeMismatch(format!("segmentation side {} for input {}", seg.side, input.side)));
    }
    let class = match class {
        Some(c) => c,
        None => argmax(&model.predict_proba(std::slice::from_ref(input))?[0]),
    };
    let mut value = |zs: &[Vec<bool>]| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(256) {
            let variants: Vec<InputTensor> = chunk
                .iter()
                .map(|z| InputTensor {
                    side: input.side,
                    values: input
                        .values
                        .iter()
                        .zip(&seg.ids)
                        .map(|(&v, &s)| if z[s] { v } else { params.background })
                        .collect(),
                })
                .collect();
            out.extend(model.predict_proba(&variants)?.into_iter().map(|p| p[class]));
        }
        Ok(out)
    };
    let phi = kernel_shap_game(seg.count(), params.coalitions, params.seed, &mut value)?;
    let raw = seg.ids.iter().map(|&s| phi[s]).collect();
    Heatmap::new(Method::Shap, input.side, class, raw, MethodParams::Shap(params.clone()))
}

/// Shapley values by direct subset enumeration, in f64.
pub fn exact_shap_oracle(m: usize, value: &dyn Fn(&[bool]) -> f64) -> Result<Vec<f64>> {
    if m > EXACT_ORACLE_MAX {
        return Err(Error::TooManySegments(m));
    }
    let n = 1usize << m;
    let v: Vec<f64> = (0..n)
        .map(|mask| {
            let z: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            value(&z)
        })
        .collect();
    let fact: Vec<f64> = (0..=m).scan(1.0, |f, i| {
        let cur = *f;
        *f *= (i + 1) as f64;
        Some(cur)
    }).collect();
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..n {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            let w = fact[s] * fact[m - s - 1] / fact[m];
            *p += w * (v[mask | 1 << i] - v[mask]);
        }
    }
    Ok(phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn game(table: Vec<f64>) -> impl FnMut(&[Vec<bool>]) -> Result<Vec<f64>> {
        move |zs: &[Vec<bool>]| {
            Ok(zs
                .iter()
                .map(|z| table[z.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>()])
                .collect())
        }
    }

    fn random_table(m: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "game");
        (0..1 << m).map(|_| r.random::<f64>()).collect()
    }

    fn oracle(table: &[f64], m: usize) -> Vec<f64> {
        let f = |z: &[bool]| table[z.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>()];
        exact_shap_oracle(m, &f).unwrap()
    }

    #[test]
    fn single_player_gets_the_gap() {
        let phi = kernel_shap_game(1, Coalitions::All, 0, &mut game(vec![0.2, 0.9])).unwrap();
        assert!((phi[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn additive_game_recovers_contributions() {
        // v = 0.1 + 0.3*[a] + 0.5*[b]
        let t = vec![0.1, 0.4, 0.6, 0.9];
        let phi = kernel_shap_game(2, Coalitions::All, 0, &mut game(t)).unwrap();
        assert!((phi[0] - 0.3).abs() < 1e-12 && (phi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_hand_computed_three_player_game() {
        // v: {}=0 {1}=1 {2}=2 {1,2}=4 {3}=0 {1,3}=1 {2,3}=3 {1,2,3}=6
        let t = vec![0.0, 1.0, 2.0, 4.0, 0.0, 1.0, 3.0, 6.0];
        let phi = oracle(&t, 3);
        for (a, b) in phi.iter().zip([11.0 / 6.0, 10.0 / 3.0, 5.0 / 6.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_axioms() {
        // players 0 and 1 symmetric, player 2 null
        let v = |z: &[bool]| {
            let k = z[0] as u8 + z[1] as u8;
            [0.0, 0.3, 1.0][k as usize]
        };
        let phi = exact_shap_oracle(3, &v).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-15);
        assert_eq!(phi[2], 0.0);
        assert!(matches!(exact_shap_oracle(13, &v), Err(Error::TooManySegments(13))));
    }

    #[test]
    fn full_enumeration_matches_oracle() {
        for seed in 0..3 {
            let t = random_table(8, seed);
            let phi = kernel_shap_game(8, Coalitions::All, 0, &mut game(t.clone())).unwrap();
            for (a, b) in phi.iter().zip(oracle(&t, 8)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sampled_mode_is_efficient_and_seeded() {
        let t = random_table(10, 4);
        let a = kernel_shap_game(10, Coalitions::Sampled(300), 7, &mut game(t.clone())).unwrap();
        let b = kernel_shap_game(10, Coalitions::Sampled(300), 7, &mut game(t.clone())).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - (t[1023] - t[0])).abs() < 1e-9);
    }

    #[test]
    fn plan_enumerates_small_sizes_then_samples() {
        let p = plan(10, Coalitions::Sampled(100), 1);
        // sizes 1 and 9 (20 coalitions) fit, sizes 2 and 8 (90) do not
        assert_eq!(p.iter().filter(|(z, _)| z.iter().filter(|&&b| b).count() == 1).count(), 10);
        assert!(p.iter().all(|(z, _)| {
            let s = z.iter().filter(|&&b| b).count();
            (1..10).contains(&s)
        }));
        let all = plan(6, Coalitions::All, 0);
        assert_eq!(all.len(), 62);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(
            kernel_shap_game(21, Coalitions::All, 0, &mut |_| Ok(vec![])),
            Err(Error::TooManySegmentsForExact(21))
        ));
        assert!(kernel_shap_game(8, Coalitions::Sampled(9), 0, &mut |_| Ok(vec![])).is_err());
    }

    struct MeanReader;
    impl Classifier for MeanReader {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_side(&self) -> usize {
            8
        }
        fn predict_proba(&self, inputs: &[InputTensor]) -> Result<Vec<Vec<f64>>> {
            Ok(inputs
                .iter()
                .map(|x| {
                    let m = x.values.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
                    vec![1.0 - m, m]
                })
                .collect())
        }
    }

    #[test]
    fn linear_model_heatmap_is_segment_mass() {
        let seg = Segmentation::grid(8, 2).unwrap();
        let mut x = InputTensor::filled(8, 0.0);
        x.values[0] = 1.0; // segment 0
        x.values[63] = 0.5; // segment 3
        let p = ShapParams {
            grid: 2,
            coalitions: Coalitions::All,
            background: 0.0,
            seed: 0,
        };
        let h = kernel_shap(&MeanReader, &x, &seg, &p, Some(1)).unwrap();
        assert!((h.raw[0] - 1.0 / 64.0).abs() < 1e-12);
        assert!((h.raw[63] - 0.5 / 64.0).abs() < 1e-12);
        assert!(h.raw[7].abs() < 1e-12);
    }
}

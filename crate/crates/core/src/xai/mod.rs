//! Explanations: occlusion maps, HiResCAM and kernel SHAP, plus class-level
//! cumulative maps and cross-method agreement.

mod cam;
mod occlusion;
mod shap;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cam::{hirescam, hirescam_from_grad, hirescam_raw};
pub use occlusion::{occlusion_map, OcclusionParams};
pub use shap::{exact_shap_oracle, kernel_shap, kernel_shap_game, Coalitions, ShapParams, EXACT_ORACLE_MAX, EXACT_SHAP_MAX};

use crate::binviz::{encode_pgm, quantize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Occlusion,
    Hirescam,
    Shap,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Occlusion, Method::Hirescam, Method::Shap];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Occlusion => "occlusion",
            Method::Hirescam => "hirescam",
            Method::Shap => "shap",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Raw range recorded before rescaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    fn of(values: &[f64]) -> Self {
        Normalization {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Per-method settings echoed into sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodParams {
    Occlusion(OcclusionParams),
    Hirescam,
    Shap(ShapParams),
}

/// Square importance map at input resolution. `raw` keeps signed values;
/// [`Heatmap::scaled`] gives the [0, 1] view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub method: Method,
    pub side: usize,
    pub target_class: usize,
    pub raw: Vec<f64>,
    pub normalization: Normalization,
    pub params: MethodParams,
}

impl Heatmap {
    pub fn new(method: Method, side: usize, target_class: usize, raw: Vec<f64>, params: MethodParams) -> Result<Self> {
        if raw.len() != side * side {
            return Err(Error::ShapeMismatch(format!("{} values for side {side}", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("heatmap has non-finite values".into()));
        }
        Ok(Heatmap {
            method,
            side,
            target_class,
            normalization: Normalization::of(&raw),
            raw,
            params,
        })
    }

    pub fn scaled(&self) -> Vec<f64> {
        let Normalization { min, max } = self.normalization;
        let span = max - min;
        self.raw
            .iter()
            .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
            .collect()
    }

    /// Recovers raw values from a scaled grid.
    pub fn unscale(&self, scaled: &[f64]) -> Vec<f64> {
        let Normalization { min, max } = self.normalization;
        scaled.iter().map(|&s| min + s * (max - min)).collect()
    }

    /// Mean over a `cells`×`cells` grid of equal blocks (row-major).
    pub fn pooled(&self, cells: usize) -> Result<Vec<f64>> {
        if cells == 0 || self.side % cells != 0 {
            return Err(Error::ShapeMismatch(format!("{cells} cells do not tile side {}", self.side)));
        }
        let b = self.side / cells;
        let mut out = vec![0.0; cells * cells];
        for r in 0..self.side {
            for c in 0..self.side {
                out[(r / b) * cells + c / b] += self.raw[r * self.side + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= (b * b) as f64);
        Ok(out)
    }

    fn band_share(&self, from: usize, to: usize, weight: fn(f64) -> f64) -> f64 {
        let total: f64 = self.raw.iter().map(|&v| weight(v)).sum();
        if total == 0.0 {
            return 0.0;
        }
        let band: f64 = self.raw[from * self.side..to.min(self.side) * self.side]
            .iter()
            .map(|&v| weight(v))
            .sum();
        band / total
    }

    /// Share of absolute mass falling in rows `[from, to)`.
    pub fn row_band_mass(&self, from: usize, to: usize) -> f64 {
        self.band_share(from, to, f64::abs)
    }

    /// Same over the positive part only, which is what an exported (clipped)
    /// map shows.
    pub fn row_band_positive_mass(&self, from: usize, to: usize) -> f64 {
        self.band_share(from, to, |v| v.max(0.0))
    }
}

/// Pixel-to-segment assignment over a regular `grid`×`grid` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub side: usize,
    pub grid: usize,
    pub ids: Vec<usize>,
}

impl Segmentation {
    pub fn grid(side: usize, grid: usize) -> Result<Self> {
        if grid == 0 || grid > side {
            return Err(Error::InvalidConfig(format!("segment grid {grid} for side {side}")));
        }
        let ids = (0..side * side)
            .map(|p| {
                let (r, c) = (p / side, p % side);
                (r * grid / side) * grid + c * grid / side
            })
            .collect();
        Ok(Segmentation { side, grid, ids })
    }

    pub fn count(&self) -> usize {
        self.grid * self.grid
    }
}

/// Elementwise mean of raw grids, rescaled afresh.
pub fn cumulative_heatmap(maps: &[Heatmap]) -> Result<Heatmap> {
    let first = maps.first().ok_or(Error::EmptyList)?;
    let mut acc = vec![0.0; first.raw.len()];
    for m in maps {
        if m.method != first.method || m.target_class != first.target_class {
            return Err(Error::MixedMethods);
        }
        if m.side != first.side {
            return Err(Error::ShapeMismatch(format!("side {} vs {}", m.side, first.side)));
        }
        acc.iter_mut().zip(&m.raw).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Heatmap::new(first.method, first.side, first.target_class, acc, first.params.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementScore {
    /// Sorted, so scores are symmetric in argument order.
    pub pair: (Method, Method),
    pub iou_topk: f64,
    pub rank_corr: f64,
    pub k: usize,
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Set IoU of two index lists.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            r[p] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks). Two constant
/// inputs correlate 1 if equal and 0 otherwise.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

pub fn agreement(h1: &Heatmap, h2: &Heatmap, k: usize) -> Result<AgreementScore> {
    if h1.side != h2.side {
        return Err(Error::ShapeMismatch(format!("sides {} and {}", h1.side, h2.side)));
    }
    let pair = if h1.method <= h2.method {
        (h1.method, h2.method)
    } else {
        (h2.method, h1.method)
    };
    Ok(AgreementScore {
        pair,
        iou_topk: iou(&top_k(&h1.raw, k), &top_k(&h2.raw, k)),
        rank_corr: spearman(&h1.raw, &h2.raw),
        k,
    })
}

/// Every unordered pair of the given maps.
pub fn pairwise_agreement(maps: &[Heatmap], k: usize) -> Result<Vec<AgreementScore>> {
    let mut out = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            out.push(agreement(&maps[i], &maps[j], k)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub method: Method,
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    pub min: f64,
    pub max: f64,
    pub side: usize,
    pub params: MethodParams,
}

/// Writes `<stem>.pgm` (rescaled) and `<stem>.json`.
pub fn write_heatmap(dir: &Path, stem: &str, h: &Heatmap, class_label: Option<&str>) -> Result<()> {
    let (px, _) = quantize(&h.raw);
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, encode_pgm(h.side, h.side, &px)).map_err(|e| Error::io(&pgm, e))?;
    let side = HeatmapSidecar {
        method: h.method,
        class: h.target_class,
        class_label: class_label.map(str::to_string),
        min: h.normalization.min,
        max: h.normalization.max,
        side: h.side,
        params: h.params.clone(),
    };
    let js = dir.join(format!("{stem}.json"));
    fs::write(&js, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&js, e))
}

/// Grayscale input with the heatmap's cell grid drawn over it.
pub fn grid_overlay(input: &crate::binviz::InputTensor, cells: usize) -> Vec<u8> {
    let s = input.side;
    let step = (s / cells.max(1)).max(1);
    (0..s * s)
        .map(|p| {
            let (r, c) = (p / s, p % s);
            if r % step == 0 || c % step == 0 {
                255
            } else {
                (input.values[p].clamp(0.0, 1.0) * 191.0) as u8
            }
        })
        .collect()
}

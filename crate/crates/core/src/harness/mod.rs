//! Splits, metrics and the robustness experiments.

mod experiment;

pub use experiment::{
    corpus_digest, degradation_experiment, enhancement_experiment, morph_pass_sensitivity, overlay_shift,
    progressive_subsets, progressive_training, run_experiment, CorpusSummary, ExperimentOutcome, ExperimentReport,
    GridCell, ModelSummary, MorphPassRow, OverlayShift, Prepared, ProgressivePoint, TestVariant, TrainVariant,
    REPORT_SCHEMA_VERSION,
};

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binformat::{serialize, Binary, Origin};
use crate::binviz::{bytes_to_image, to_input, InputTensor};
use crate::error::{Error, Result};
use crate::nn::{predict, Classifier};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub val_fraction_of_train: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.20,
            val_fraction_of_train: 0.15,
            stratified: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Binary>,
    pub val: Vec<Binary>,
    pub test: Vec<Binary>,
}

/// Largest-remainder apportionment of `total` over `sizes`; ties go to the
/// earlier group.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut out: Vec<usize> = sizes.iter().map(|&s| s * total / sum).collect();
    let mut rem: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| (s * total % sum, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Id of the base sample a (possibly transformed) sample descends from.
fn root_id<'a>(b: &'a Binary, by_id: &HashMap<&str, &'a Binary>) -> &'a str {
    let mut cur = b;
    let mut steps = 0;
    while let Some(p) = cur.parent_id.as_deref() {
        match by_id.get(p) {
            Some(parent) if steps < 64 => {
                cur = parent;
                steps += 1;
            }
            _ => return p,
        }
    }
    &cur.id
}

/// Train/val/test partition of the base samples; transformed samples follow
/// their root parent so no family tree straddles partitions.
pub fn split(corpus: &[Binary], spec: &SplitSpec) -> Result<Split> {
    for (n, v) in [("test_fraction", spec.test_fraction), ("val_fraction_of_train", spec.val_fraction_of_train)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidConfig(format!("{n} must be in (0,1), got {v}")));
        }
    }
    let by_id: HashMap<&str, &Binary> = corpus.iter().map(|b| (b.id.as_str(), b)).collect();
    // groups keyed by root id, bucketed by family
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut family_of: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, b) in corpus.iter().enumerate() {
        let root = root_id(b, &by_id);
        groups.entry(root).or_default().push(i);
        family_of.entry(root).or_insert(b.family.as_str());
    }
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (&root, &fam) in &family_of {
        let key = if spec.stratified { fam } else { "" };
        strata.entry(key).or_default().push(root);
    }
    if spec.stratified {
        if let Some((fam, ids)) = strata.iter().find(|(_, ids)| ids.len() < 3) {
            return Err(Error::ClassTooSmall {
                family: fam.to_string(),
                count: ids.len(),
            });
        }
    }
    let n: usize = strata.values().map(Vec::len).sum();
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = ((n - n_test) as f64 * spec.val_fraction_of_train).round() as usize;
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let tests = apportion(&sizes, n_test);
    let vals = apportion(&sizes.iter().zip(&tests).map(|(s, t)| s - t).collect::<Vec<_>>(), n_val);

    let mut part: HashMap<&str, u8> = HashMap::new();
    for (((key, roots), &nt), &nv) in strata.iter().zip(&tests).zip(&vals) {
        let mut roots = roots.clone();
        let mut r = rng::stream(spec.seed, &format!("split/{key}"));
        roots.shuffle(&mut r);
        for (j, root) in roots.into_iter().enumerate() {
            part.insert(root, if j < nt { 2 } else if j < nt + nv { 1 } else { 0 });
        }
    }
    let mut out = Split::default();
    for (root, members) in groups {
        let dst = match part[root] {
            2 => &mut out.test,
            1 => &mut out.val,
            _ => &mut out.train,
        };
        dst.extend(members.into_iter().map(|i| corpus[i].clone()));
    }
    for v in [&mut out.train, &mut out.val, &mut out.test] {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(out)
}

/// Model input for a sample: byte plot of its serialized form, resampled.
pub fn binary_input(b: &Binary, side: usize, lambda_norm: bool) -> Result<InputTensor> {
    let img = bytes_to_image(&serialize(b), None)?;
    Ok(to_input(&img, side, lambda_norm))
}

pub fn inputs_for(bins: &[Binary], side: usize, lambda_norm: bool) -> Result<Vec<InputTensor>> {
    bins.iter().map(|b| binary_input(b, side, lambda_norm)).collect()
}

/// Label indices of `bins` against the sorted class list.
pub fn labels_for(bins: &[Binary], classes: &[String]) -> Result<Vec<usize>> {
    bins.iter()
        .map(|b| {
            classes
                .iter()
                .position(|c| *c == b.family)
                .ok_or_else(|| Error::ShapeMismatch(format!("family {} is not a model class", b.family)))
        })
        .collect()
}

/// Sorted distinct families of the base samples.
pub fn class_list(corpus: &[Binary]) -> Vec<String> {
    let mut v: Vec<String> = corpus
        .iter()
        .filter(|b| b.origin == Origin::Base)
        .map(|b| b.family.clone())
        .collect();
    v.sort();
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, classes: &[String]) -> Result<Self> {
        let c = classes.len();
        if confusion.len() != c || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch(format!("confusion matrix is not {c}x{c}")));
        }
        let count: usize = confusion.iter().flatten().sum();
        if count == 0 {
            return Err(Error::EmptyTestSet);
        }
        let diag: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[k]).sum();
                let precision = ratio(confusion[k][k], predicted);
                let recall = ratio(confusion[k][k], support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    label: classes[k].clone(),
                    support,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let avg = |f: fn(&ClassMetrics) -> f64| present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64;
        Ok(Metrics {
            count,
            accuracy: diag as f64 / count as f64,
            macro_precision: avg(|m| m.precision),
            macro_recall: avg(|m| m.recall),
            macro_f1: avg(|m| m.f1),
            per_class,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: &[String]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch("truth and prediction lengths differ".into()));
        }
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::ShapeMismatch(format!("label outside {c} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion, classes)
    }
}

/// Metrics of `model` on already-prepared inputs.
pub fn evaluate_inputs<M: Classifier + ?Sized>(
    model: &M,
    inputs: &[InputTensor],
    labels: &[usize],
    classes: &[String],
) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let pred: Vec<usize> = predict(model, inputs)?.into_iter().map(|(c, _)| c).collect();
    Metrics::from_predictions(labels, &pred, classes)
}

/// Metrics of `model` on `test`, labels taken from sample families.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    test: &[Binary],
    classes: &[String],
    lambda_norm: bool,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let inputs = inputs_for(test, model.input_side(), lambda_norm)?;
    let labels = labels_for(test, classes)?;
    evaluate_inputs(model, &inputs, &labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binformat::{Section, SectionKind, CONTAINER_MAGIC};

    fn corpus(per_family: &[(&str, usize)]) -> Vec<Binary> {
        let mut v = Vec::new();
        for (fam, n) in per_family {
            for i in 0..*n {
                v.push(Binary::new(
                    &format!("{fam}-{i:04}"),
                    *fam,
                    CONTAINER_MAGIC,
                    vec![Section::new(SectionKind::Data, vec![i as u8; 64])],
                    vec![],
                ));
            }
        }
        v
    }

    fn ids(v: &[Binary]) -> Vec<String> {
        v.iter().map(|b| b.id.clone()).collect()
    }

    #[test]
    fn hundred_samples_split_80_20_then_68_12() {
        let c = corpus(&[("a", 20), ("b", 20), ("c", 20), ("d", 20), ("e", 20)]);
        let s = split(&c, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 12, 20));
        for fam in ["a", "b", "c", "d", "e"] {
            assert_eq!(s.test.iter().filter(|b| b.family == fam).count(), 4);
        }
        let t = split(&c, &SplitSpec::default()).unwrap();
        assert_eq!(ids(&s.test), ids(&t.test));
        assert_eq!(ids(&s.val), ids(&t.val));
        let mut all: Vec<String> = [ids(&s.train), ids(&s.val), ids(&s.test)].concat();
        all.sort();
        let mut orig = ids(&c);
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn unstratified_split_has_same_sizes() {
        let c = corpus(&[("a", 70), ("b", 30)]);
        let spec = SplitSpec {
            stratified: false,
            ..Default::default()
        };
        let s = split(&c, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 12, 20));
    }

    #[test]
    fn children_follow_parents() {
        let mut c = corpus(&[("a", 30), ("b", 30)]);
        let kids: Vec<Binary> = c
            .iter()
            .flat_map(|b| {
                let mut k = b.clone();
                k.id = format!("{}.packed", b.id);
                k.origin = Origin::Packed;
                k.parent_id = Some(b.id.clone());
                let mut g = k.clone();
                g.id = format!("{}.morphed", k.id);
                g.origin = Origin::Morphed;
                g.parent_id = Some(k.id.clone());
                [k, g]
            })
            .collect();
        c.extend(kids);
        let s = split(&c, &SplitSpec::default()).unwrap();
        let part = |id: &str| -> usize {
            [&s.train, &s.val, &s.test]
                .iter()
                .position(|p| p.iter().any(|b| b.id == id))
                .unwrap()
        };
        let mut pairs = 0;
        for b in &c {
            if let Some(p) = &b.parent_id {
                assert_eq!(part(&b.id), part(p), "{} vs {p}", b.id);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 120);
        // only base samples count toward the fractions
        assert_eq!(s.test.len(), 12 * 3);
    }

    #[test]
    fn tiny_family_is_rejected() {
        let c = corpus(&[("a", 20), ("b", 2)]);
        assert!(matches!(
            split(&c, &SplitSpec::default()),
            Err(Error::ClassTooSmall { count: 2, .. })
        ));
    }

    #[test]
    fn hand_computed_confusion() {
        let classes = vec!["x".to_string(), "y".to_string()];
        let m = Metrics::from_confusion(vec![vec![8, 2], vec![4, 6]], &classes).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.macro_precision - (8.0 / 12.0 + 6.0 / 8.0) / 2.0).abs() < 1e-12);
        let r0: f64 = 0.8;
        let p0: f64 = 8.0 / 12.0;
        assert!((m.per_class[0].f1 - 2.0 * p0 * r0 / (p0 + r0)).abs() < 1e-12);
        for (k, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), m.per_class[k].support);
        }
    }

    #[test]
    fn perfect_and_permuted_predictions() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let t = vec![0, 1, 2, 2, 1, 0, 0];
        let m = Metrics::from_predictions(&t, &t, &classes).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let p = vec![0, 2, 2, 1, 1, 0, 1];
        let a = Metrics::from_predictions(&t, &p, &classes).unwrap();
        let mut order: Vec<usize> = (0..t.len()).collect();
        order.reverse();
        let t2: Vec<usize> = order.iter().map(|&i| t[i]).collect();
        let p2: Vec<usize> = order.iter().map(|&i| p[i]).collect();
        assert_eq!(a, Metrics::from_predictions(&t2, &p2, &classes).unwrap());
    }

    #[test]
    fn never_predicted_class_scores_zero_and_absent_class_is_ignored() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = Metrics::from_predictions(&[0, 0, 1], &[0, 0, 0], &classes).unwrap();
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.per_class[2].support, 0);
        // macro over the two present classes only
        assert!((m.macro_recall - 0.5).abs() < 1e-12);
        assert!(matches!(Metrics::from_predictions(&[], &[], &classes), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn apportion_keeps_totals() {
        assert_eq!(apportion(&[20, 20, 20, 20, 20], 20), vec![4; 5]);
        assert_eq!(apportion(&[16, 16, 16, 16, 16], 12), vec![3, 3, 2, 2, 2]);
        assert_eq!(apportion(&[320, 240, 200, 160, 80], 200), vec![64, 48, 40, 32, 16]);
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{class_list, evaluate_inputs, inputs_for, labels_for, split, Metrics, Split, SplitSpec};
use crate::binformat::{serialize, Binary, Origin};
use crate::binviz::InputTensor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{checkpoint_digest, train, History, Model, ModelConfig, TrainOutcome};
use crate::obfusc::{
    build_enhanced_training_set, conversion_report, morph, transform_all, ConversionReport, EnhanceStats, Packer,
    SubstitutionTable,
};
use crate::rng::{derive_seed, stream};
use crate::xai::hirescam;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainVariant {
    Base,
    Enhanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestVariant {
    Base,
    Morphed,
    Packed,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 2] = [TrainVariant::Base, TrainVariant::Enhanced];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainVariant::Base => "base",
            TrainVariant::Enhanced => "enhanced",
        }
    }
}

impl TestVariant {
    pub const ALL: [TestVariant; 3] = [TestVariant::Base, TestVariant::Morphed, TestVariant::Packed];

    pub fn as_str(self) -> &'static str {
        match self {
            TestVariant::Base => "base",
            TestVariant::Morphed => "morphed",
            TestVariant::Packed => "packed",
        }
    }
}

/// One evaluation of a model on a test variant. Samples the transform did
/// not apply to are left out and counted by reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train_variant: TrainVariant,
    pub test_variant: TestVariant,
    pub evaluated: usize,
    pub skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
    /// Absent when nothing was applicable.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressivePoint {
    pub fraction: f64,
    pub train_samples: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphPassRow {
    pub passes: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub metrics: Option<Metrics>,
}

/// Mean share of positive HiResCAM mass in the top and bottom quarter rows,
/// before and after packing, over test samples that could be packed. The
/// `abs_*` fields use absolute mass instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayShift {
    pub model: TrainVariant,
    pub samples: usize,
    pub top_before: f64,
    pub top_after: f64,
    pub bottom_before: f64,
    pub bottom_after: f64,
    pub abs_top_before: f64,
    pub abs_top_after: f64,
    pub abs_bottom_before: f64,
    pub abs_bottom_after: f64,
}

impl OverlayShift {
    pub fn bottom_gain(&self) -> f64 {
        self.bottom_after - self.bottom_before
    }

    pub fn top_loss(&self) -> f64 {
        self.top_before - self.top_after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub variant: TrainVariant,
    pub seed: u64,
    pub train_samples: usize,
    pub checkpoint_digest: String,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub digest: String,
    pub samples: usize,
    pub families: BTreeMap<String, usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub corpus: CorpusSummary,
    pub classes: Vec<String>,
    pub grid: Vec<GridCell>,
    pub progressive: Vec<ProgressivePoint>,
    pub morph_passes: Vec<MorphPassRow>,
    pub enhancement: EnhanceStats,
    pub conversion: ConversionReport,
    pub overlay_shift: Vec<OverlayShift>,
    pub models: Vec<ModelSummary>,
}

impl ExperimentReport {
    pub fn cell(&self, train: TrainVariant, test: TestVariant) -> Option<&GridCell> {
        self.grid
            .iter()
            .find(|c| c.train_variant == train && c.test_variant == test)
    }

    /// Accuracy of a grid cell, if it was evaluated.
    pub fn accuracy(&self, train: TrainVariant, test: TestVariant) -> Option<f64> {
        self.cell(train, test)?.metrics.as_ref().map(|m| m.accuracy)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Metric grid as CSV, one row per cell.
    pub fn grid_csv(&self) -> String {
        let mut s =
            String::from("train_variant,test_variant,evaluated,skipped,accuracy,macro_precision,macro_recall,macro_f1\n");
        for c in &self.grid {
            let m = match &c.metrics {
                Some(m) => format!(
                    "{:.6},{:.6},{:.6},{:.6}",
                    m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
                ),
                None => ",,,".to_string(),
            };
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.train_variant.as_str(),
                c.test_variant.as_str(),
                c.evaluated,
                c.skipped,
                m
            ));
        }
        s
    }
}

/// SHA-256 over ids, families and serialized bytes, in id order.
pub fn corpus_digest(corpus: &[Binary]) -> String {
    let mut order: Vec<&Binary> = corpus.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut h = Sha256::new();
    for b in order {
        let bytes = serialize(b);
        for part in [b.id.as_bytes(), b.family.as_bytes(), &bytes] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex::encode(h.finalize())
}

/// Inputs and labels of an evaluated sample set.
#[derive(Debug, Clone)]
struct Prepped {
    inputs: Vec<InputTensor>,
    labels: Vec<usize>,
    skip_reasons: BTreeMap<String, usize>,
    skipped: usize,
}

/// Everything the experiments share: the split, class list, obfuscation
/// backends and the prepared test variants.
pub struct Prepared {
    pub config: Config,
    pub classes: Vec<String>,
    pub split: Split,
    pub table: SubstitutionTable,
    pub packer: Packer,
    pub corpus: CorpusSummary,
    /// Packed test samples, paired with their index in `split.test`.
    pub packed_test: Vec<(usize, Binary)>,
    train_inputs: Vec<InputTensor>,
    train_labels: Vec<usize>,
    val_inputs: Vec<InputTensor>,
    val_labels: Vec<usize>,
    tests: BTreeMap<TestVariant, Prepped>,
}

fn count_reasons(skipped: &BTreeMap<String, String>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for why in skipped.values() {
        *out.entry(why.clone()).or_insert(0) += 1;
    }
    out
}

impl Prepared {
    /// Splits the base samples of `corpus` and builds the test variants.
    pub fn new(corpus: &[Binary], config: &Config, table: SubstitutionTable, packer: Packer) -> Result<Self> {
        config.validate()?;
        let base: Vec<Binary> = corpus.iter().filter(|b| b.origin == Origin::Base).cloned().collect();
        if base.is_empty() {
            return Err(Error::EmptyList);
        }
        let classes = class_list(&base);
        let spec = SplitSpec {
            test_fraction: config.split.test_fraction,
            val_fraction_of_train: config.split.val_fraction_of_train,
            stratified: config.split.stratified,
            seed: derive_seed(config.seed, "split"),
        };
        let split = split(&base, &spec)?;
        let side = config.input_side;
        let lambda = config.hyper.lambda_norm;
        let mut families = BTreeMap::new();
        for b in &base {
            *families.entry(b.family.clone()).or_insert(0) += 1;
        }
        let summary = CorpusSummary {
            digest: corpus_digest(&base),
            samples: base.len(),
            families,
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        };

        let mut tests = BTreeMap::new();
        tests.insert(
            TestVariant::Base,
            Prepped {
                inputs: inputs_for(&split.test, side, lambda)?,
                labels: labels_for(&split.test, &classes)?,
                skip_reasons: BTreeMap::new(),
                skipped: 0,
            },
        );
        let morph_seed = derive_seed(config.seed, "test/morph");
        let (morphed, why) = transform_all(&split.test, |b| morph(b, &table, 1, morph_seed))?;
        tests.insert(TestVariant::Morphed, prep_variant(&morphed, &why, &classes, side, lambda)?);
        let (packed, why) = transform_all(&split.test, |b| packer.pack(b))?;
        tests.insert(TestVariant::Packed, prep_variant(&packed, &why, &classes, side, lambda)?);
        let packed_test = packed
            .into_iter()
            .map(|p| {
                let parent = p.parent_id.as_deref().unwrap_or_default();
                let i = split.test.iter().position(|b| b.id == parent).expect("parent in test set");
                (i, p)
            })
            .collect();

        Ok(Prepared {
            config: config.clone(),
            train_inputs: inputs_for(&split.train, side, lambda)?,
            train_labels: labels_for(&split.train, &classes)?,
            val_inputs: inputs_for(&split.val, side, lambda)?,
            val_labels: labels_for(&split.val, &classes)?,
            classes,
            split,
            table,
            packer,
            corpus: summary,
            packed_test,
            tests,
        })
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.config.seed, "model")
    }

    fn fresh_model(&self) -> Result<Model<f32>> {
        Model::new(ModelConfig {
            hyper: self.config.hyper.clone(),
            input_side: self.config.input_side,
            classes: self.classes.clone(),
            seed: self.model_seed(),
        })
    }

    fn val(&self) -> Option<(&[InputTensor], &[usize])> {
        if self.val_inputs.is_empty() {
            None
        } else {
            Some((&self.val_inputs, &self.val_labels))
        }
    }

    /// Trains a freshly initialised model; every variant starts from the
    /// same weights and uses the same data-order seed.
    pub fn train_on(&self, inputs: &[InputTensor], labels: &[usize]) -> Result<TrainOutcome> {
        train(
            self.fresh_model()?,
            inputs,
            labels,
            self.val(),
            self.config.hyper.epochs,
            derive_seed(self.config.seed, "train"),
        )
    }

    pub fn train_base(&self) -> Result<TrainOutcome> {
        self.train_on(&self.train_inputs, &self.train_labels)
    }

    pub fn enhanced_set(&self) -> Result<(Vec<Binary>, EnhanceStats)> {
        let o = &self.config.obfuscation;
        let set = build_enhanced_training_set(
            &self.split.train,
            o.pack_fraction,
            o.morph_fraction,
            o.morph_passes,
            &self.table,
            &self.packer,
            derive_seed(self.config.seed, "enhance"),
        )?;
        Ok((set.binaries, set.stats))
    }

    pub fn test_inputs(&self, variant: TestVariant) -> (&[InputTensor], &[usize]) {
        let p = &self.tests[&variant];
        (&p.inputs, &p.labels)
    }

    /// Evaluates `model` on one test variant.
    pub fn cell(&self, model: &Model<f32>, train: TrainVariant, test: TestVariant) -> Result<GridCell> {
        let p = &self.tests[&test];
        let metrics = if p.inputs.is_empty() {
            None
        } else {
            Some(evaluate_inputs(model, &p.inputs, &p.labels, &self.classes)?)
        };
        Ok(GridCell {
            train_variant: train,
            test_variant: test,
            evaluated: p.inputs.len(),
            skipped: p.skipped,
            skip_reasons: p.skip_reasons.clone(),
            metrics,
        })
    }

    pub fn row(&self, model: &Model<f32>, train: TrainVariant) -> Result<Vec<GridCell>> {
        TestVariant::ALL.iter().map(|&t| self.cell(model, train, t)).collect()
    }

    fn summary(&self, variant: TrainVariant, outcome: &TrainOutcome, train_samples: usize) -> ModelSummary {
        ModelSummary {
            variant,
            seed: self.model_seed(),
            train_samples,
            checkpoint_digest: checkpoint_digest(&outcome.model),
            history: outcome.history.clone(),
        }
    }
}

fn prep_variant(
    bins: &[Binary],
    why: &BTreeMap<String, String>,
    classes: &[String],
    side: usize,
    lambda: bool,
) -> Result<Prepped> {
    Ok(Prepped {
        inputs: inputs_for(bins, side, lambda)?,
        labels: labels_for(bins, classes)?,
        skip_reasons: count_reasons(why),
        skipped: why.len(),
    })
}

/// Base model trained on the clean training partition, evaluated on the
/// clean, morphed and packed test variants.
pub fn degradation_experiment(prep: &Prepared) -> Result<(TrainOutcome, Vec<GridCell>)> {
    let outcome = prep.train_base()?;
    let row = prep.row(&outcome.model, TrainVariant::Base)?;
    Ok((outcome, row))
}

/// Model trained on the training partition plus packed and morphed copies,
/// evaluated on the same three test variants.
pub fn enhancement_experiment(prep: &Prepared) -> Result<(TrainOutcome, EnhanceStats, Vec<GridCell>)> {
    let (set, stats) = prep.enhanced_set()?;
    let side = prep.config.input_side;
    let inputs = inputs_for(&set, side, prep.config.hyper.lambda_norm)?;
    let labels = labels_for(&set, &prep.classes)?;
    let outcome = prep.train_on(&inputs, &labels)?;
    let row = prep.row(&outcome.model, TrainVariant::Enhanced)?;
    Ok((outcome, stats, row))
}

/// Indices into `train` of the per-family subsets for each fraction. Each
/// family is shuffled once, so every subset contains the smaller ones; the
/// indices keep training-partition order.
pub fn progressive_subsets(train: &[Binary], fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut by_family: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in train.iter().enumerate() {
        by_family.entry(b.family.as_str()).or_default().push(i);
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new(); // (index, rank within family)
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for (fam, idx) in &by_family {
        let mut order = idx.clone();
        order.sort_by(|&a, &b| train[a].id.cmp(&train[b].id));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(seed, &format!("progressive/{fam}")));
        ranked.extend(order.into_iter().enumerate().map(|(r, i)| (i, r)));
        sizes.insert(fam, idx.len());
    }
    let mut rank = vec![0; train.len()];
    for (i, r) in ranked {
        rank[i] = r;
    }
    fractions
        .iter()
        .map(|&f| {
            (0..train.len())
                .filter(|&i| {
                    let n = sizes[train[i].family.as_str()];
                    let keep = ((f * n as f64).round() as usize).clamp(1, n);
                    rank[i] < keep
                })
                .collect()
        })
        .collect()
}

/// Test metrics after training on growing stratified subsets. When
/// `full` is given it is reused for fraction 1.0, which trains on exactly
/// the base training set.
pub fn progressive_training(
    prep: &Prepared,
    fractions: &[f64],
    full: Option<&Metrics>,
) -> Result<Vec<ProgressivePoint>> {
    let subsets = progressive_subsets(
        &prep.split.train,
        fractions,
        derive_seed(prep.config.seed, "progressive"),
    );
    let (test_x, test_y) = prep.test_inputs(TestVariant::Base);
    let mut out = Vec::with_capacity(fractions.len());
    for (&f, idx) in fractions.iter().zip(subsets) {
        let metrics = match full {
            Some(m) if idx.len() == prep.split.train.len() => m.clone(),
            _ => {
                let xs: Vec<InputTensor> = idx.iter().map(|&i| prep.train_inputs[i].clone()).collect();
                let ys: Vec<usize> = idx.iter().map(|&i| prep.train_labels[i]).collect();
                let o = prep.train_on(&xs, &ys)?;
                evaluate_inputs(&o.model, test_x, test_y, &prep.classes)?
            }
        };
        out.push(ProgressivePoint {
            fraction: f,
            train_samples: idx.len(),
            metrics,
        });
    }
    Ok(out)
}

/// Metrics of `model` on the test partition morphed 1, 2, 3... times.
pub fn morph_pass_sensitivity(prep: &Prepared, model: &Model<f32>, passes: &[usize]) -> Result<Vec<MorphPassRow>> {
    let seed = derive_seed(prep.config.seed, "test/morph");
    let side = prep.config.input_side;
    let lambda = prep.config.hyper.lambda_norm;
    passes
        .iter()
        .map(|&p| {
            let (bins, why) = transform_all(&prep.split.test, |b| morph(b, &prep.table, p, seed))?;
            let v = prep_variant(&bins, &why, &prep.classes, side, lambda)?;
            let metrics = if v.inputs.is_empty() {
                None
            } else {
                Some(evaluate_inputs(model, &v.inputs, &v.labels, &prep.classes)?)
            };
            Ok(MorphPassRow {
                passes: p,
                evaluated: v.inputs.len(),
                skipped: v.skipped,
                metrics,
            })
        })
        .collect()
}

/// HiResCAM for each sample's true family, on the clean sample and on its
/// packed copy; mass shares of the top and bottom quarter rows.
pub fn overlay_shift(prep: &Prepared, model: &Model<f32>, variant: TrainVariant) -> Result<OverlayShift> {
    let side = prep.config.input_side;
    let q = side / 4;
    let (clean_x, clean_y) = prep.test_inputs(TestVariant::Base);
    let (packed_x, _) = prep.test_inputs(TestVariant::Packed);
    let mut acc = [0.0f64; 8];
    for ((i, _), px) in prep.packed_test.iter().zip(packed_x) {
        let class = clean_y[*i];
        let before = hirescam(model, &clean_x[*i], class)?;
        let after = hirescam(model, px, class)?;
        let bands = [(0, q), (side - q, side)];
        for (k, &(a, z)) in bands.iter().enumerate() {
            acc[2 * k] += before.row_band_positive_mass(a, z);
            acc[2 * k + 1] += after.row_band_positive_mass(a, z);
            acc[4 + 2 * k] += before.row_band_mass(a, z);
            acc[4 + 2 * k + 1] += after.row_band_mass(a, z);
        }
    }
    let n = prep.packed_test.len();
    let m = acc.map(|v| v / n.max(1) as f64);
    Ok(OverlayShift {
        model: variant,
        samples: n,
        top_before: m[0],
        top_after: m[1],
        bottom_before: m[2],
        bottom_after: m[3],
        abs_top_before: m[4],
        abs_top_after: m[5],
        abs_bottom_before: m[6],
        abs_bottom_after: m[7],
    })
}

/// Report plus the two trained models.
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub base: TrainOutcome,
    pub enhanced: TrainOutcome,
}

/// Runs every experiment on `corpus` under `config`.
pub fn run_experiment(
    corpus: &[Binary],
    config: &Config,
    table: SubstitutionTable,
    packer: Packer,
) -> Result<ExperimentOutcome> {
    let prep = Prepared::new(corpus, config, table, packer)?;
    let (base, mut grid) = degradation_experiment(&prep)?;
    let (enhanced, stats, row) = enhancement_experiment(&prep)?;
    grid.extend(row);
    let full = grid[0].metrics.clone();
    let progressive = progressive_training(&prep, &config.experiment.progressive_fractions, full.as_ref())?;
    let morph_passes = morph_pass_sensitivity(&prep, &base.model, &config.experiment.morph_pass_counts)?;

    let all_base: Vec<Binary> = [&prep.split.train, &prep.split.val, &prep.split.test]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let morph_seed = derive_seed(config.seed, "test/morph");
    let (morphed, _) = transform_all(&all_base, |b| morph(b, &prep.table, 1, morph_seed))?;
    let (packed, _) = transform_all(&all_base, |b| prep.packer.pack(b))?;
    let mut transformed = morphed;
    transformed.extend(packed);
    let conversion = conversion_report(&all_base, &transformed);

    let overlay = vec![
        overlay_shift(&prep, &base.model, TrainVariant::Base)?,
        overlay_shift(&prep, &enhanced.model, TrainVariant::Enhanced)?,
    ];
    let n_enh = prep.split.train.len() + stats.packed + stats.morphed;
    let models = vec![
        prep.summary(TrainVariant::Base, &base, prep.split.train.len()),
        prep.summary(TrainVariant::Enhanced, &enhanced, n_enh),
    ];
    let seeds: BTreeMap<String, u64> = [
        ("root", config.seed),
        ("split", derive_seed(config.seed, "split")),
        ("model", prep.model_seed()),
        ("train", derive_seed(config.seed, "train")),
        ("enhance", derive_seed(config.seed, "enhance")),
        ("test_morph", morph_seed),
        ("progressive", derive_seed(config.seed, "progressive")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        seeds,
        corpus: prep.corpus.clone(),
        classes: prep.classes.clone(),
        grid,
        progressive,
        morph_passes,
        enhancement: stats,
        conversion,
        overlay_shift: overlay,
        models,
    };
    Ok(ExperimentOutcome { report, base, enhanced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binformat::{default_corpus_spec, generate_corpus};
    use crate::nn::Hyperparams;

    fn small_config() -> Config {
        Config {
            seed: 3,
            input_side: 16,
            hyper: Hyperparams {
                filters: vec![4, 8],
                dense1: 32,
                dense2: 16,
                batch_size: 8,
                epochs: 2,
                learning_rate: 0.01,
                ..Default::default()
            },
            experiment: crate::config::ExperimentConfig {
                progressive_fractions: vec![0.5, 1.0],
                morph_pass_counts: vec![1, 2],
            },
            ..Default::default()
        }
    }

    fn small_corpus() -> Vec<Binary> {
        generate_corpus(&default_corpus_spec().scaled(0.05), 11).unwrap()
    }

    #[test]
    fn progressive_subsets_are_nested_and_stratified() {
        let corpus = small_corpus();
        let subsets = progressive_subsets(&corpus, &[0.2, 0.4, 0.6, 0.8, 1.0], 5);
        for w in subsets.windows(2) {
            assert!(w[0].iter().all(|i| w[1].contains(i)));
            assert!(w[0].len() < w[1].len());
        }
        assert_eq!(subsets[4].len(), corpus.len());
        for fam in ["aster", "bramble", "cobalt", "dune", "ember"] {
            assert!(subsets[0].iter().any(|&i| corpus[i].family == fam));
        }
        assert_eq!(subsets, progressive_subsets(&corpus, &[0.2, 0.4, 0.6, 0.8, 1.0], 5));
    }

    #[test]
    fn small_experiment_runs_and_is_deterministic() {
        let corpus = small_corpus();
        let cfg = small_config();
        let run = || run_experiment(&corpus, &cfg, SubstitutionTable::default(), Packer::Emulated).unwrap();
        let a = run();
        assert_eq!(a.report.grid.len(), 6);
        for t in TrainVariant::ALL {
            for v in TestVariant::ALL {
                assert!(a.report.cell(t, v).is_some());
            }
        }
        // passes = 1 is the degradation morphed cell
        assert_eq!(
            a.report.morph_passes[0].metrics,
            a.report.cell(TrainVariant::Base, TestVariant::Morphed).unwrap().metrics
        );
        // fraction 1.0 is the base experiment
        assert_eq!(
            Some(&a.report.progressive[1].metrics),
            a.report.cell(TrainVariant::Base, TestVariant::Base).unwrap().metrics.as_ref()
        );
        let json = a.report.to_json();
        assert_eq!(ExperimentReport::from_json(&json).unwrap(), a.report);
        assert_eq!(a.report.grid_csv().lines().count(), 7);
        let b = run();
        assert_eq!(json, b.report.to_json());
    }

    #[test]
    fn full_fraction_retrains_to_the_same_model() {
        let corpus = small_corpus();
        let cfg = small_config();
        let prep = Prepared::new(&corpus, &cfg, SubstitutionTable::default(), Packer::Emulated).unwrap();
        let (base, row) = degradation_experiment(&prep).unwrap();
        let points = progressive_training(&prep, &[1.0], None).unwrap();
        assert_eq!(Some(&points[0].metrics), row[0].metrics.as_ref());
        let again = prep.train_base().unwrap();
        assert_eq!(checkpoint_digest(&base.model), checkpoint_digest(&again.model));
    }

    #[test]
    fn test_variants_only_come_from_test_parents() {
        let corpus = small_corpus();
        let prep = Prepared::new(&corpus, &small_config(), SubstitutionTable::default(), Packer::Emulated).unwrap();
        for (i, p) in &prep.packed_test {
            assert_eq!(p.parent_id.as_deref(), Some(prep.split.test[*i].id.as_str()));
        }
        let c = &prep.tests[&TestVariant::Packed];
        assert_eq!(c.inputs.len() + c.skipped, prep.split.test.len());
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use malvis_core::binformat::{load_corpus, save_corpus, serialize, Binary, CorpusSpec, Origin};
use malvis_core::binviz::{bytes_to_image, encode_pgm, write_pgm};
use malvis_core::config::Config;
use malvis_core::harness::{
    binary_input, class_list, evaluate, inputs_for, labels_for, run_experiment, split, Split, SplitSpec,
    TestVariant, TrainVariant,
};
use malvis_core::nn::{argmax, checkpoint_digest, load_checkpoint, save_checkpoint, train, Classifier, Model, ModelConfig};
use malvis_core::obfusc::{build_enhanced_training_set, conversion_report, morph, transform_all};
use malvis_core::rng::derive_seed;
use malvis_core::xai::{
    cumulative_heatmap, grid_overlay, hirescam, kernel_shap, occlusion_map, pairwise_agreement, write_heatmap,
    Heatmap, Method, Segmentation,
};
use malvis_core::{Error, Result};
use serde::Serialize;

use crate::{Cli, Command, MethodArg, ObfuscateMode, Partition};

fn load_config(cli: &Cli) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    c.apply_env()?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    Ok(c)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s)
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn split_spec(c: &Config) -> SplitSpec {
    SplitSpec {
        test_fraction: c.split.test_fraction,
        val_fraction_of_train: c.split.val_fraction_of_train,
        stratified: c.split.stratified,
        seed: derive_seed(c.seed, "split"),
    }
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    config: &'a Config,
    #[serde(flatten)]
    body: T,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::GenCorpus { spec, scale, out } => gen_corpus(&config, spec.as_deref(), scale, &out),
        Command::Convert { manifest, out } => convert(&manifest, &out),
        Command::Train { manifest, out } => train_cmd(&config, &manifest, &out),
        Command::Eval {
            checkpoint,
            manifest,
            partition,
            out,
        } => eval_cmd(&config, &checkpoint, &manifest, partition, &out),
        Command::Obfuscate {
            manifest,
            mode,
            passes,
            out,
        } => obfuscate(&config, &manifest, mode, passes, &out),
        Command::Augment {
            manifest,
            pack_fraction,
            morph_fraction,
            out,
        } => augment(&config, &manifest, pack_fraction, morph_fraction, &out),
        Command::Explain {
            checkpoint,
            manifest,
            sample,
            class,
            method,
            out,
        } => explain(&config, &checkpoint, &manifest, sample, class, method, &out),
        Command::Experiment { manifest, out } => experiment(&config, manifest.as_deref(), out.as_deref()),
    }
}

fn gen_corpus(config: &Config, spec: Option<&Path>, scale: Option<f64>, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(p) => CorpusSpec::load(p)?,
        None => config.corpus_spec()?,
    };
    if let Some(f) = scale {
        if !(f > 0.0) {
            return Err(Error::InvalidConfig(format!("--scale must be > 0, got {f}")));
        }
        spec = spec.scaled(f);
    }
    let corpus = malvis_core::binformat::generate_corpus(&spec, derive_seed(config.seed, "corpus"))?;
    ensure_dir(out)?;
    save_corpus(&corpus, out)?;
    write_file(&out.join("spec.toml"), spec.to_toml())?;
    println!("{} samples in {} families -> {}", corpus.len(), spec.families.len(), out.display());
    Ok(())
}

fn convert(manifest: &Path, out: &Path) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let dir = out.join("images");
    ensure_dir(&dir)?;
    for b in &corpus {
        let img = bytes_to_image(&serialize(b), None)?;
        write_pgm(&dir.join(format!("{}.pgm", safe_name(&b.id))), &img)?;
    }
    println!("{} images -> {}", corpus.len(), dir.display());
    Ok(())
}

fn partition(corpus: &[Binary], config: &Config, which: Partition) -> Result<Vec<Binary>> {
    if which == Partition::All {
        return Ok(corpus.to_vec());
    }
    let Split { train, val, test } = split(corpus, &split_spec(config))?;
    Ok(match which {
        Partition::Train => train,
        Partition::Val => val,
        _ => test,
    })
}

fn train_cmd(config: &Config, manifest: &Path, out: &Path) -> Result<()> {
    config.validate()?;
    let corpus = load_corpus(manifest)?;
    let classes = class_list(&corpus);
    let parts = split(&corpus, &split_spec(config))?;
    let side = config.input_side;
    let lambda = config.hyper.lambda_norm;
    let model = Model::new(ModelConfig {
        hyper: config.hyper.clone(),
        input_side: side,
        classes: classes.clone(),
        seed: derive_seed(config.seed, "model"),
    })?;
    let xs = inputs_for(&parts.train, side, lambda)?;
    let ys = labels_for(&parts.train, &classes)?;
    let vx = inputs_for(&parts.val, side, lambda)?;
    let vy = labels_for(&parts.val, &classes)?;
    let val = (!vx.is_empty()).then_some((vx.as_slice(), vy.as_slice()));
    let outcome = train(model, &xs, &ys, val, config.hyper.epochs, derive_seed(config.seed, "train"))?;
    ensure_dir(out)?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    write_file(&out.join("history.csv"), outcome.history.to_csv())?;
    #[derive(Serialize)]
    struct Body<'a> {
        classes: &'a [String],
        train: usize,
        val: usize,
        test: usize,
        checkpoint_digest: String,
        history: &'a malvis_core::nn::History,
    }
    let digest = checkpoint_digest(&outcome.model);
    write_json(
        &out.join("train.json"),
        &Artifact {
            config,
            body: Body {
                classes: &classes,
                train: parts.train.len(),
                val: parts.val.len(),
                test: parts.test.len(),
                checkpoint_digest: digest.clone(),
                history: &outcome.history,
            },
        },
    )?;
    let last = outcome.history.epochs.last();
    println!(
        "trained {} epochs on {} samples; val accuracy {}; checkpoint {}",
        outcome.history.epochs.len(),
        parts.train.len(),
        last.and_then(|e| e.val_accuracy).map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
        &digest[..16]
    );
    Ok(())
}

fn eval_cmd(config: &Config, checkpoint: &Path, manifest: &Path, which: Partition, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(manifest)?;
    let samples = partition(&corpus, config, which)?;
    let classes = model.config.classes.clone();
    let metrics = evaluate(&model, &samples, &classes, model.config.hyper.lambda_norm)?;
    ensure_dir(out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        checkpoint_digest: String,
        partition: String,
        metrics: &'a malvis_core::harness::Metrics,
    }
    write_json(
        &out.join("metrics.json"),
        &Artifact {
            config,
            body: Body {
                checkpoint_digest: checkpoint_digest(&model),
                partition: format!("{which:?}").to_lowercase(),
                metrics: &metrics,
            },
        },
    )?;
    println!(
        "{} samples: accuracy {:.4}, macro precision {:.4}, macro F1 {:.4}",
        metrics.count, metrics.accuracy, metrics.macro_precision, metrics.macro_f1
    );
    Ok(())
}

fn base_only(corpus: &[Binary]) -> Vec<Binary> {
    corpus.iter().filter(|b| b.origin == Origin::Base).cloned().collect()
}

fn obfuscate(config: &Config, manifest: &Path, mode: ObfuscateMode, passes: Option<usize>, out: &Path) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let base = base_only(&corpus);
    let passes = passes.unwrap_or(config.obfuscation.morph_passes);
    let (done, skipped) = match mode {
        ObfuscateMode::Pack => {
            let packer = config.packer();
            transform_all(&base, |b| packer.pack(b))?
        }
        ObfuscateMode::Morph => {
            if passes == 0 {
                return Err(Error::InvalidConfig("--passes must be >= 1".into()));
            }
            let table = config.substitution_table()?;
            let seed = derive_seed(config.seed, "obfuscate/morph");
            transform_all(&base, |b| morph(b, &table, passes, seed))?
        }
    };
    let report = conversion_report(&base, &done);
    let mut all = base.clone();
    all.extend(done.iter().cloned());
    ensure_dir(out)?;
    save_corpus(&all, out)?;
    #[derive(Serialize)]
    struct Body<'a> {
        mode: &'static str,
        passes: Option<usize>,
        report: &'a malvis_core::obfusc::ConversionReport,
        skipped: &'a BTreeMap<String, String>,
    }
    let (name, stats) = match mode {
        ObfuscateMode::Pack => ("pack", &report.pack),
        ObfuscateMode::Morph => ("morph", &report.morph),
    };
    write_json(
        &out.join("conversion.json"),
        &Artifact {
            config,
            body: Body {
                mode: name,
                passes: (mode == ObfuscateMode::Morph).then_some(passes),
                report: &report,
                skipped: &skipped,
            },
        },
    )?;
    println!(
        "{name}: {}/{} converted ({:.2}%) -> {}",
        stats.converted,
        stats.total,
        stats.percent,
        out.display()
    );
    Ok(())
}

fn augment(config: &Config, manifest: &Path, pack: Option<f64>, morph_f: Option<f64>, out: &Path) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let base = base_only(&corpus);
    let o = &config.obfuscation;
    let set = build_enhanced_training_set(
        &base,
        pack.unwrap_or(o.pack_fraction),
        morph_f.unwrap_or(o.morph_fraction),
        o.morph_passes,
        &config.substitution_table()?,
        &config.packer(),
        derive_seed(config.seed, "enhance"),
    )?;
    ensure_dir(out)?;
    save_corpus(&set.binaries, out)?;
    write_json(&out.join("augment.json"), &Artifact { config, body: &set.stats })?;
    println!(
        "{} originals + {} packed + {} morphed -> {}",
        base.len(),
        set.stats.packed,
        set.stats.morphed,
        out.display()
    );
    Ok(())
}

fn methods(arg: MethodArg) -> Vec<Method> {
    match arg {
        MethodArg::Occlusion => vec![Method::Occlusion],
        MethodArg::Hirescam => vec![Method::Hirescam],
        MethodArg::Shap => vec![Method::Shap],
        MethodArg::All => Method::ALL.to_vec(),
    }
}

fn heatmap(
    config: &Config,
    model: &Model<f32>,
    input: &malvis_core::InputTensor,
    class: usize,
    method: Method,
) -> Result<Heatmap> {
    match method {
        Method::Occlusion => occlusion_map(model, input, &config.xai.occlusion()),
        Method::Hirescam => hirescam(model, input, class),
        Method::Shap => {
            let seg = Segmentation::grid(input.side, config.xai.grid)?;
            kernel_shap(model, input, &seg, &config.xai.shap(derive_seed(config.seed, "shap")), Some(class))
        }
    }
}

fn explain(
    config: &Config,
    checkpoint: &Path,
    manifest: &Path,
    sample: Option<String>,
    class: Option<String>,
    method: MethodArg,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(manifest)?;
    let classes = &model.config.classes;
    let side = model.input_side();
    let lambda = model.config.hyper.lambda_norm;
    let methods = methods(method);
    ensure_dir(out)?;

    let (stem, label, maps) = if let Some(id) = sample {
        let b = corpus
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no sample with id {id}")))?;
        let input = binary_input(b, side, lambda)?;
        let probs = model.predict_proba(std::slice::from_ref(&input))?.remove(0);
        let c = argmax(&probs);
        write_file(&out.join(format!("{}_input.pgm", safe_name(&id))), encode_pgm(side, side, &grid_overlay(&input, config.xai.grid)))?;
        let maps = methods
            .iter()
            .map(|&m| heatmap(config, &model, &input, c, m))
            .collect::<Result<Vec<_>>>()?;
        (safe_name(&id), classes[c].clone(), maps)
    } else {
        let fam = class.expect("clap requires sample or class");
        let c = classes
            .iter()
            .position(|x| *x == fam)
            .ok_or_else(|| Error::InvalidConfig(format!("class {fam} is not one of {classes:?}")))?;
        let mut members: Vec<&Binary> = corpus.iter().filter(|b| b.family == fam).collect();
        members.sort_by(|a, b| a.id.cmp(&b.id));
        // cumulative maps need one target class, so keep samples the model
        // assigns to this family
        let mut inputs = Vec::new();
        for b in members {
            if inputs.len() == config.xai.samples_per_class {
                break;
            }
            let x = binary_input(b, side, lambda)?;
            if argmax(&model.predict_proba(std::slice::from_ref(&x))?[0]) == c {
                inputs.push(x);
            }
        }
        if inputs.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let mut maps = Vec::new();
        for &m in &methods {
            let each = inputs
                .iter()
                .map(|x| heatmap(config, &model, x, c, m))
                .collect::<Result<Vec<_>>>()?;
            maps.push(cumulative_heatmap(&each)?);
        }
        (format!("class_{}", safe_name(&fam)), fam, maps)
    };

    for h in &maps {
        write_heatmap(out, &format!("{stem}_{}", h.method.as_str()), h, Some(&label))?;
    }
    if maps.len() > 1 {
        let k = config.xai.top_k.min(side * side);
        let scores = pairwise_agreement(&maps, k)?;
        #[derive(Serialize)]
        struct Body<'a> {
            target: &'a str,
            scores: &'a [malvis_core::xai::AgreementScore],
        }
        write_json(
            &out.join(format!("{stem}_agreement.json")),
            &Artifact {
                config,
                body: Body {
                    target: &label,
                    scores: &scores,
                },
            },
        )?;
    }
    println!("{} heatmap(s) for {label} -> {}", maps.len(), out.display());
    Ok(())
}

fn experiment(config: &Config, manifest: Option<&Path>, out: Option<&Path>) -> Result<()> {
    config.validate()?;
    let corpus = match manifest {
        Some(p) => load_corpus(p)?,
        None => config.generate_corpus()?,
    };
    let out = out.unwrap_or(&config.out_dir);
    let result = run_experiment(&corpus, config, config.substitution_table()?, config.packer())?;
    ensure_dir(out)?;
    let r = &result.report;
    write_file(&out.join("report.json"), r.to_json())?;
    write_file(&out.join("report.csv"), r.grid_csv())?;
    save_checkpoint(&result.base.model, &out.join("base.ckpt"))?;
    save_checkpoint(&result.enhanced.model, &out.join("enhanced.ckpt"))?;
    write_file(&out.join("history_base.csv"), result.base.history.to_csv())?;
    write_file(&out.join("history_enhanced.csv"), result.enhanced.history.to_csv())?;

    println!("train     test      n     accuracy  macro_P   macro_F1");
    for c in &r.grid {
        let m = c.metrics.as_ref();
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<9} {:<9} {:<5} {:<9} {:<9} {}",
            c.train_variant.as_str(),
            c.test_variant.as_str(),
            c.evaluated,
            f(m.map(|m| m.accuracy)),
            f(m.map(|m| m.macro_precision)),
            f(m.map(|m| m.macro_f1))
        );
    }
    for p in &r.progressive {
        println!("progressive {:.2}: accuracy {:.4}", p.fraction, p.metrics.accuracy);
    }
    if let (Some(b), Some(e)) = (
        r.accuracy(TrainVariant::Base, TestVariant::Packed),
        r.accuracy(TrainVariant::Enhanced, TestVariant::Packed),
    ) {
        println!("packed accuracy gain from enhancement: {:+.4}", e - b);
    }
    println!("report -> {}", out.join("report.json").display());
    Ok(())
}

//! One function per subcommand. Each parses and validates every option
//! before touching data, then writes its outputs plus `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dgnam::am::{
    pixel_am, random_search, synthesize_pair, synthesize_units, AMConfig, AMResult, ClipBound, Init, NormMode, PixelPrior, Range, SearchSpace,
    Synth,
};
use dgnam::analysis::{
    channel_means, generalization_score, reflection_metrics, snapshot_report, Embedding, ReflectionKind, Space,
    NNQueryResult,
};
use dgnam::data::{build_modified_dataset, decode_ppm, encode_ppm, montage, split_indices, Dataset, Modification, Permutation, Split};
use dgnam::nn::{builtin, NetworkInstance};
use dgnam::tensor::Tensor;
use dgnam::train::{
    argmax, compute_code_stats, log_to_csv, reconstruction_mse, train_classifier, train_dgn, CodeStats, Frozen, LossWeights,
    OptimizerKind, Schedule, TrainConfig,
};

use crate::params::{input, optional, output, required, value, Key, Params, CONFIG, SEED};

pub struct Sub {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: fn() -> Vec<Key>,
    pub run: fn(&Params) -> Result<()>,
}

pub const ALL: &[Sub] = &[
    Sub { name: "train-encoder", about: "Train a classifier and write its checkpoints", keys: train_encoder_keys, run: train_encoder },
    Sub { name: "train-dgn", about: "Train a generator to invert one code layer of a fixed encoder", keys: train_dgn_keys, run: run_train_dgn },
    Sub { name: "code-stats", about: "Per-unit code statistics that define the clip box", keys: code_stats_keys, run: code_stats },
    Sub { name: "synthesize", about: "Maximize units through a generator", keys: synthesize_keys, run: synthesize },
    Sub { name: "pixel-am", about: "Pixel-space maximization with a hand-designed prior", keys: pixel_keys, run: pixel },
    Sub { name: "search", about: "Random search over synthesis hyperparameters", keys: search_keys, run: search },
    Sub { name: "nnsearch", about: "Nearest dataset image to a query image", keys: nn_keys, run: nnsearch },
    Sub { name: "reflect", about: "Compare syntheses of regular and modified classes", keys: reflect_keys, run: reflect },
    Sub { name: "snapshots", about: "Synthesize the same units across training checkpoints", keys: snapshot_keys, run: snapshots },
    Sub { name: "transfer", about: "Score a generator's syntheses against a target network", keys: transfer_keys, run: transfer },
    Sub { name: "modify-data", about: "Write a dataset with modified copies of every class", keys: modify_keys, run: modify_data },
];

fn keys(parts: &[&[Key]]) -> Vec<Key> {
    let mut v = vec![CONFIG, SEED];
    for p in parts {
        v.extend_from_slice(p);
    }
    v
}

const OUT_DIR: Key = output("out", "output directory");

const TRAIN: &[Key] = &[
    value("iterations", "2000", "optimizer steps"),
    value("batch-size", "32", "minibatch size"),
    value("learning-rate", "0.001", "base learning rate"),
    value("optimizer", "adam", "adam or sgd"),
    value("beta1", "0.9", "adam first-moment decay"),
    value("beta2", "0.999", "adam second-moment decay"),
    value("momentum", "0.9", "sgd momentum"),
    value("lr-step", "0", "multiply the rate by lr-gamma every this many steps; 0 keeps it constant"),
    value("lr-gamma", "0.5", "step schedule factor"),
    value("checkpoint-every", "250", "snapshot and evaluate every this many steps"),
    value("val-fraction", "0.2", "held-out validation fraction"),
    value("eval-batch", "256", "batch size for evaluation passes"),
];

const AM: &[Key] = &[
    value("lambda", "0.005", "code regularization weight"),
    value("learning-rate", "1", "ascent step size"),
    value("iterations", "200", "ascent steps"),
    value("init", "gaussian_from_stats", "zeros, gaussian_from_stats or uniform_box"),
    value("clip", "true", "clip every unit to its box after each step"),
    value("clip-bound", "3sigma", "3sigma or mean+3sigma"),
    value("norm-mode", "squared", "squared or plain"),
    value("momentum", "0", "ascent momentum in [0, 1)"),
];

const SYNTH: &[Key] = &[
    input("target", true, "network whose units are maximized"),
    input("gen", true, "generator checkpoint"),
    input("stats", false, "code statistics of the generator's input layer"),
    value("layer", "logits", "target layer"),
];

fn train_encoder_keys() -> Vec<Key> {
    keys(&[
        &[input("data", true, "dataset directory"), value("arch", "encoder_a", "encoder_a or encoder_b"), value("train-fraction", "1", "fraction of the training split used")],
        TRAIN,
        &[OUT_DIR],
    ])
}

fn train_dgn_keys() -> Vec<Key> {
    let mut train = TRAIN.to_vec();
    train[0] = value("iterations", "1000", "optimizer steps");
    keys(&[
        &[
            input("data", true, "dataset directory"),
            input("encoder", true, "trained encoder checkpoint"),
            value("layer", "fc_pre", "code layer the generator inverts"),
            value("comparator-layer", "conv_mid", "encoder layer used as the feature-space comparator"),
            value("w-img", "1", "image-space loss weight"),
            value("w-feat", "1", "feature-space loss weight"),
            value("w-adv", "0.01", "adversarial loss weight; 0 disables the discriminator"),
        ],
        &train,
        &[OUT_DIR],
    ])
}

fn code_stats_keys() -> Vec<Key> {
    keys(&[&[
        input("encoder", true, "encoder checkpoint"),
        value("layer", "fc_pre", "code layer"),
        input("data", true, "dataset directory"),
        value("split", "validation", "validation (split by seed) or full"),
        value("val-fraction", "0.2", "held-out validation fraction"),
        value("eval-batch", "256", "batch size"),
        output("out", "statistics file"),
    ]])
}

fn synthesize_keys() -> Vec<Key> {
    keys(&[
        SYNTH,
        &[required("unit", "target unit; repeat or comma-separate for several"), optional("unit2", "second unit for pair synthesis"), value("gamma", "0", "pair balance weight")],
        AM,
        &[value("jobs", "1", "worker threads for unit lists"), OUT_DIR],
    ])
}

fn pixel_keys() -> Vec<Key> {
    keys(&[&[
        input("target", true, "network whose units are maximized"),
        value("layer", "logits", "target layer"),
        required("unit", "target unit; repeat or comma-separate for several"),
        value("prior", "none", "none, l2_decay, blur or jitter"),
        value("decay-rate", "0.01", "l2_decay shrink factor per step"),
        value("blur-every", "4", "blur period in steps"),
        value("blur-radius", "0.5", "blur standard deviation in pixels"),
        value("jitter", "2", "maximum circular shift in pixels"),
        value("learning-rate", "0.1", "ascent step size"),
        value("iterations", "200", "ascent steps"),
        value("init", "uniform_box", "zeros, uniform_box or gaussian_from_stats"),
        value("momentum", "0", "ascent momentum in [0, 1)"),
        OUT_DIR,
    ]])
}

fn search_keys() -> Vec<Key> {
    keys(&[
        SYNTH,
        &[
            required("unit", "target unit"),
            value("trials", "20", "sampled configurations"),
            value("lambda-min", "0.0001", "log-uniform lambda range"),
            value("lambda-max", "0.1", "log-uniform lambda range"),
            value("lr-min", "0.1", "log-uniform step-size range"),
            value("lr-max", "5", "log-uniform step-size range"),
            value("iter-min", "50", "inclusive iteration range"),
            value("iter-max", "300", "inclusive iteration range"),
        ],
        &AM[3..],
        &[OUT_DIR],
    ])
}

fn nn_keys() -> Vec<Key> {
    keys(&[&[
        input("query", true, "query image (PPM)"),
        input("data", true, "dataset directory"),
        value("space", "pixel", "pixel, a code layer, a comma list, or all"),
        optional("class", "restrict the search to one class"),
        input("encoder", false, "encoder for code spaces"),
        value("eval-batch", "256", "batch size for embedding"),
        OUT_DIR,
    ]])
}

fn reflect_keys() -> Vec<Key> {
    keys(&[&[
        value("kind", "quarter_shuffle", "channel_brg, gaussian_blur or quarter_shuffle"),
        input("group-a", true, "directory of regular-class syntheses (PPM)"),
        input("group-b", true, "directory of modified-class syntheses (PPM)"),
        input("reference", false, "unmodified dataset supplying reference channel means"),
        OUT_DIR,
    ]])
}

fn snapshot_keys() -> Vec<Key> {
    keys(&[
        &[
            required("ckpt-glob", "glob of checkpoints of one run"),
            input("gen", true, "generator checkpoint"),
            input("stats", false, "code statistics of the generator's input layer"),
            value("layer", "logits", "target layer"),
            required("unit", "target units"),
        ],
        AM,
        &[OUT_DIR],
    ])
}

fn transfer_keys() -> Vec<Key> {
    keys(&[
        SYNTH,
        &[
            value("unit", "all", "target units, or all"),
            input("data", true, "dataset for the validation activations"),
            value("val-fraction", "0.2", "held-out validation fraction"),
            value("eval-batch", "256", "batch size"),
        ],
        AM,
        &[value("jobs", "1", "worker threads"), OUT_DIR],
    ])
}

fn modify_keys() -> Vec<Key> {
    keys(&[&[
        required("kind", "quarter_shuffle, channel_brg, gaussian_blur or identity"),
        input("in", true, "source dataset"),
        value("radius", "1", "blur standard deviation in pixels"),
        value("permutation", "random", "random, or four quadrant digits such as 1032"),
        optional("palette", "r,g,b tint applied to grayscale input first"),
        output("out", "destination dataset directory"),
    ]])
}

// ---- shared plumbing ----

fn prepare_out(p: &Params) -> Result<PathBuf> {
    let dir = p.path("out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("manifest.txt"), p.manifest().as_bytes())?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_net(p: &Params, key: &str) -> Result<NetworkInstance> {
    let path = p.path(key)?;
    NetworkInstance::load(&path).with_context(|| format!("loading --{key} {}", path.display()))
}

fn load_data(p: &Params, key: &str) -> Result<Dataset> {
    let path = p.path(key)?;
    Dataset::load(&path).with_context(|| format!("loading --{key} {}", path.display()))
}

fn load_stats(p: &Params) -> Result<Option<CodeStats>> {
    p.opt_str("stats").map(|s| CodeStats::load(s).with_context(|| format!("loading --stats {s}"))).transpose()
}

fn train_config(p: &Params) -> Result<TrainConfig> {
    let optimizer = match p.str("optimizer")? {
        "adam" => OptimizerKind::Adam { beta1: p.get("beta1")?, beta2: p.get("beta2")? },
        "sgd" => OptimizerKind::Sgd { momentum: p.get("momentum")? },
        other => bail!("--optimizer {other}: expected adam or sgd"),
    };
    let step: usize = p.get("lr-step")?;
    let schedule = if step == 0 { Schedule::Constant } else { Schedule::Step { every: step, gamma: p.get("lr-gamma")? } };
    let cfg = TrainConfig {
        iterations: p.get("iterations")?,
        batch_size: p.get("batch-size")?,
        learning_rate: p.get("learning-rate")?,
        schedule,
        optimizer,
        seed: p.seed()?,
        checkpoint_every: p.get("checkpoint-every")?,
        weights: LossWeights::default(),
        eval_batch: p.get("eval-batch")?,
    };
    Ok(cfg)
}

fn parse_init(s: &str) -> Result<Init> {
    Ok(match s {
        "zeros" => Init::Zeros,
        "gaussian_from_stats" => Init::GaussianFromStats,
        "uniform_box" => Init::UniformBox,
        other => bail!("--init {other}: expected zeros, gaussian_from_stats or uniform_box"),
    })
}

/// AM options; `clip`, `clip-bound` and `norm-mode` fall back to defaults
/// where a subcommand does not declare them.
fn am_config(p: &Params) -> Result<AMConfig> {
    let d = AMConfig::default();
    let cfg = AMConfig {
        lambda: p.opt("lambda")?.unwrap_or(d.lambda),
        learning_rate: p.opt("learning-rate")?.unwrap_or(d.learning_rate),
        iterations: p.opt("iterations")?.unwrap_or(d.iterations),
        init: parse_init(p.str("init")?)?,
        seed: p.seed()?,
        clip: if p.has("clip") { p.flag("clip")? } else { d.clip },
        clip_bound: match p.opt_str("clip-bound") {
            None | Some("3sigma") => ClipBound::ThreeSigma,
            Some("mean+3sigma") => ClipBound::MeanPlusThreeSigma,
            Some(other) => bail!("--clip-bound {other}: expected 3sigma or mean+3sigma"),
        },
        norm_mode: match p.opt_str("norm-mode") {
            None | Some("squared") => NormMode::Squared,
            Some("plain") => NormMode::Plain,
            Some(other) => bail!("--norm-mode {other}: expected squared or plain"),
        },
        gamma: p.opt("gamma")?.unwrap_or(0.0),
        momentum: p.get("momentum")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The clip box and stats-shaped inits need statistics; fail before loading anything.
fn require_stats(p: &Params, cfg: &AMConfig) -> Result<()> {
    if !p.has("stats") {
        if cfg.clip {
            bail!("clipping is enabled but --stats is missing");
        }
        if cfg.init != Init::Zeros {
            bail!("--init {} needs --stats", p.str("init")?);
        }
    }
    Ok(())
}

fn image_shape(net: &NetworkInstance) -> Result<[usize; 3]> {
    match *net.spec.input.as_slice() {
        [c, h, w] => Ok([c, h, w]),
        ref other => bail!("expected an image network, input is {other:?}"),
    }
}

fn batch1(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    Ok(image.reshape(&shape)?)
}

/// Per-run record: the effective configuration and where the best iterate fell.
fn result_text(r: &AMResult, top1: usize) -> String {
    let mut s = r.config.echo();
    let best = r.best();
    let _ = writeln!(s, "units={}", r.units.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "best_iteration={}", r.best_iteration);
    let _ = writeln!(s, "best_objective={}", best.objective);
    let _ = writeln!(s, "best_activation={}", best.activations.iter().map(f32::to_string).collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "top1={top1}");
    s
}

fn write_result(dir: &Path, stem: &str, r: &AMResult, target: &NetworkInstance) -> Result<usize> {
    let top1 = argmax(target.forward(&batch1(&r.image)?)?.data());
    write(&dir.join(format!("{stem}.ppm")), &encode_ppm(&r.image)?)?;
    write(&dir.join(format!("{stem}_trace.csv")), r.trace_csv().as_bytes())?;
    write(&dir.join(format!("{stem}_config.txt")), result_text(r, top1).as_bytes())?;
    Ok(top1)
}

/// Writes per-unit artifacts, a montage and `summary.csv`.
fn write_unit_results(dir: &Path, results: &[AMResult], target: &NetworkInstance) -> Result<()> {
    let mut summary = String::from("unit,best_iteration,best_objective,best_activation,top1\n");
    for r in results {
        let unit = r.units[0];
        let top1 = write_result(dir, &format!("unit_{unit}"), r, target)?;
        let _ = writeln!(summary, "{unit},{},{},{},{top1}", r.best_iteration, r.best().objective, r.best_activation());
    }
    write(&dir.join("summary.csv"), summary.as_bytes())?;
    let images: Vec<Tensor> = results.iter().map(|r| r.image.clone()).collect();
    write(&dir.join("montage.ppm"), &encode_ppm(&montage(&images, 10)?)?)
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_ppm(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Channel mean when the consumer expects one channel.
fn to_channels(image: Tensor, channels: usize) -> Result<Tensor> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref other => bail!("expected [C, H, W], got {other:?}"),
    };
    if c == channels {
        return Ok(image);
    }
    if channels != 1 {
        bail!("cannot convert a {c}-channel image to {channels} channels");
    }
    let plane = h * w;
    let x = image.data();
    let gray = (0..plane).map(|i| (0..c).map(|k| x[k * plane + i]).sum::<f32>() / c as f32).collect();
    Ok(Tensor::new(vec![1, h, w], gray)?)
}

fn ppm_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|f| f.extension().is_some_and(|e| e == "ppm"));
    files.sort();
    if files.is_empty() {
        bail!("{} holds no .ppm images", dir.display());
    }
    files.iter().map(|f| Ok((f.file_name().unwrap_or_default().to_string_lossy().into_owned(), read_ppm(f)?))).collect()
}

// ---- subcommands ----

fn train_encoder(p: &Params) -> Result<()> {
    let cfg = train_config(p)?;
    cfg.validate()?;
    let train_fraction: f64 = p.get("train-fraction")?;
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        bail!("--train-fraction {train_fraction}: expected a value in (0, 1]");
    }
    let arch = p.str("arch")?;
    let data = load_data(p, "data")?;
    let (mut train, val) = data.split(p.get("val-fraction")?, cfg.seed)?;
    if train_fraction < 1.0 {
        let (_, keep) = split_indices(train.len(), train_fraction, cfg.seed.wrapping_add(7))?;
        train = train.subset(&keep, Split::Train)?;
    }
    let spec = match arch {
        "encoder_a" => builtin::encoder_a(data.image_shape(), data.num_classes())?,
        "encoder_b" => builtin::encoder_b(data.image_shape(), data.num_classes())?,
        other => bail!("--arch {other}: expected encoder_a or encoder_b"),
    };
    let out = prepare_out(p)?;
    let run = train_classifier(spec, &train, &val, &cfg, p.str("data")?)?;
    let ckpts = out.join("checkpoints");
    fs::create_dir_all(&ckpts)?;
    for c in &run.checkpoints {
        c.save(ckpts.join(format!("encoder_{:06}.ckpt", c.meta.iteration)))?;
    }
    run.network.save(out.join("encoder.ckpt"))?;
    write(&out.join("log.csv"), log_to_csv(&run.log).as_bytes())?;
    println!("trained {arch} on {} images: validation accuracy {:.4}", train.len(), run.network.meta.val_accuracy.unwrap_or(f32::NAN));
    Ok(())
}

/// MSE of predicting every image by the training mean image.
fn mean_image_mse(train: &Dataset, val: &Dataset) -> f64 {
    let width = train.images.len() / train.len();
    let mut mean = vec![0.0f64; width];
    for row in train.images.data().chunks(width) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64 / train.len() as f64);
    }
    let sum: f64 = val.images.data().chunks(width).map(|row| row.iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>()).sum();
    sum / val.images.len() as f64
}

fn run_train_dgn(p: &Params) -> Result<()> {
    let mut cfg = train_config(p)?;
    cfg.weights = LossWeights { img: p.get("w-img")?, feat: p.get("w-feat")?, adv: p.get("w-adv")? };
    cfg.validate()?;
    let layer = p.str("layer")?;
    let encoder = load_net(p, "encoder")?;
    let comparator = encoder.truncated(p.str("comparator-layer")?, "comparator")?;
    let data = load_data(p, "data")?;
    let (train, val) = data.split(p.get("val-fraction")?, cfg.seed)?;
    let g = NetworkInstance::init(builtin::generator_for(&encoder.spec, layer)?, cfg.seed)?;
    let d = NetworkInstance::init(builtin::discriminator(image_shape(&encoder)?)?, cfg.seed.wrapping_add(1))?;
    let out = prepare_out(p)?;
    let frozen = Frozen { encoder: &encoder, layer, comparator: &comparator };
    let run = train_dgn(g, d, frozen, &train, Some(&val), &cfg)?;
    let ckpts = out.join("checkpoints");
    fs::create_dir_all(&ckpts)?;
    for c in &run.checkpoints {
        c.save(ckpts.join(format!("generator_{:06}.ckpt", c.meta.iteration)))?;
    }
    run.generator.save(out.join("generator.ckpt"))?;
    run.discriminator.save(out.join("discriminator.ckpt"))?;
    write(&out.join("log.csv"), log_to_csv(&run.log).as_bytes())?;
    let mse = reconstruction_mse(&run.generator, frozen, &val, cfg.eval_batch)?;
    let baseline = mean_image_mse(&train, &val);
    let summary = format!("layer,val_mse,mean_image_mse,ratio,d_skipped\n{layer},{mse},{baseline},{},{}\n", mse / baseline, run.d_skipped);
    write(&out.join("reconstruction.csv"), summary.as_bytes())?;
    println!("generator for {layer}: validation MSE {mse:.5} vs mean-image {baseline:.5}");
    Ok(())
}

fn code_stats(p: &Params) -> Result<()> {
    let seed = p.seed()?;
    let layer = p.str("layer")?;
    let batch: usize = p.get("eval-batch")?;
    let split = p.str("split")?;
    if !matches!(split, "validation" | "full") {
        bail!("--split {split}: expected validation or full");
    }
    let encoder = load_net(p, "encoder")?;
    let data = load_data(p, "data")?;
    let data = if split == "validation" { data.split(p.get("val-fraction")?, seed)?.1 } else { data };
    let stats = compute_code_stats(&encoder, layer, &data, batch)?;
    let out = p.path("out")?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    stats.save(&out)?;
    let mut manifest = out.clone().into_os_string();
    manifest.push(".manifest.txt");
    write(Path::new(&manifest), p.manifest().as_bytes())?;
    println!("{layer}: {} units over {} samples", stats.mean.len(), stats.samples);
    Ok(())
}

fn synthesize(p: &Params) -> Result<()> {
    let cfg = am_config(p)?;
    require_stats(p, &cfg)?;
    let units: Vec<usize> = p.list("unit")?;
    let unit2: Option<usize> = p.opt("unit2")?;
    let jobs: usize = p.get("jobs")?;
    if unit2.is_some() && units.len() != 1 {
        bail!("pair synthesis takes exactly one --unit alongside --unit2");
    }
    let target = load_net(p, "target")?;
    let gen = load_net(p, "gen")?;
    let stats = load_stats(p)?;
    let synth = Synth { phi: &target, layer: p.str("layer")?, generator: &gen, stats: stats.as_ref() };
    let out = prepare_out(p)?;
    if let Some(u2) = unit2 {
        let r = synthesize_pair(&synth, [units[0], u2], &cfg)?;
        write_result(&out, &format!("pair_{}_{u2}", units[0]), &r, &target)?;
        let b = r.best();
        println!("pair {},{u2}: activations {} {} at iteration {}", units[0], b.activations[0], b.activations[1], r.best_iteration);
    } else {
        let results = synthesize_units(&synth, &units, &cfg, jobs)?;
        write_unit_results(&out, &results, &target)?;
        for r in &results {
            println!("unit {}: activation {} at iteration {}", r.units[0], r.best_activation(), r.best_iteration);
        }
    }
    Ok(())
}

fn pixel(p: &Params) -> Result<()> {
    let cfg = AMConfig { lambda: 0.0, clip: false, ..am_config(p)? };
    let prior = match p.str("prior")? {
        "none" => PixelPrior::None,
        "l2_decay" => PixelPrior::L2Decay { rate: p.get("decay-rate")? },
        "blur" => PixelPrior::BlurEvery { every: p.get("blur-every")?, radius: p.get("blur-radius")? },
        "jitter" => PixelPrior::Jitter { max_shift: p.get("jitter")? },
        other => bail!("--prior {other}: expected none, l2_decay, blur or jitter"),
    };
    prior.validate()?;
    let units: Vec<usize> = p.list("unit")?;
    let layer = p.str("layer")?;
    let target = load_net(p, "target")?;
    let out = prepare_out(p)?;
    let results = units
        .iter()
        .map(|&u| pixel_am(&target, layer, u, prior, &AMConfig { seed: cfg.seed.wrapping_add(u as u64), ..cfg.clone() }))
        .collect::<dgnam::error::Result<Vec<_>>>()?;
    write_unit_results(&out, &results, &target)?;
    for r in &results {
        println!("unit {} ({}): activation {}", r.units[0], prior.name(), r.best_activation());
    }
    Ok(())
}

fn search(p: &Params) -> Result<()> {
    let base = am_config(p)?;
    require_stats(p, &base)?;
    let unit: usize = p.get("unit")?;
    let trials: usize = p.get("trials")?;
    let space = SearchSpace {
        lambda: Range::log(p.get("lambda-min")?, p.get("lambda-max")?),
        learning_rate: Range::log(p.get("lr-min")?, p.get("lr-max")?),
        iterations: (p.get("iter-min")?, p.get("iter-max")?),
    };
    space.validate()?;
    let target = load_net(p, "target")?;
    let gen = load_net(p, "gen")?;
    let stats = load_stats(p)?;
    let synth = Synth { phi: &target, layer: p.str("layer")?, generator: &gen, stats: stats.as_ref() };
    let out = prepare_out(p)?;
    let ranking = random_search(&synth, unit, &base, &space, trials, base.seed)?;
    let mut csv = String::from("rank,trial,best_activation,lambda,learning_rate,iterations,seed\n");
    for (rank, r) in ranking.iter().enumerate() {
        let c = &r.config;
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", rank + 1, r.trial, r.best_activation, c.lambda, c.learning_rate, c.iterations, c.seed);
    }
    write(&out.join("ranking.csv"), csv.as_bytes())?;
    let top = &ranking[0];
    println!("best of {trials}: trial {} activation {} (lambda {}, learning rate {}, {} iterations)", top.trial, top.best_activation, top.config.lambda, top.config.learning_rate, top.config.iterations);
    Ok(())
}

fn nnsearch(p: &Params) -> Result<()> {
    p.seed()?;
    let class: Option<usize> = p.opt("class")?;
    let batch: usize = p.get("eval-batch")?;
    let requested: Vec<String> = p.list("space")?;
    if !p.has("encoder") && requested.iter().any(|s| s != "pixel") {
        bail!("code spaces need --encoder");
    }
    let encoder = p.has("encoder").then(|| load_net(p, "encoder")).transpose()?;
    let spaces: Vec<Space> = if requested == ["all"] {
        let enc = encoder.as_ref().ok_or_else(|| anyhow!("--space all needs --encoder"))?;
        std::iter::once(Space::Pixel).chain(enc.spec.code_layers.iter().map(|l| Space::Code(l.clone()))).collect()
    } else {
        requested.iter().map(|s| Space::parse(s)).collect()
    };
    let data = load_data(p, "data")?;
    let query = to_channels(read_ppm(&p.path("query")?)?, data.image_shape()[0])?;
    let query = batch1(&query)?;
    if query.shape()[1..] != data.image_shape() {
        bail!("query is {:?} but dataset images are {:?}", &query.shape()[1..], data.image_shape());
    }
    let out = prepare_out(p)?;
    let mut csv = format!("{}\n", NNQueryResult::CSV_HEADER);
    for space in spaces {
        let emb = Embedding::new(&data, space.clone(), encoder.as_ref(), batch)?;
        let q = dgnam::analysis::embed(&query, &space, encoder.as_ref(), 1)?;
        let r = emb.query(q.data(), class)?;
        println!("{}", r.csv_row());
        let _ = writeln!(csv, "{}", r.csv_row());
    }
    write(&out.join("nn.csv"), csv.as_bytes())
}

fn reflect(p: &Params) -> Result<()> {
    p.seed()?;
    let kind = ReflectionKind::parse(p.str("kind")?)?;
    if kind == ReflectionKind::ChannelBrg && !p.has("reference") {
        bail!("--kind channel_brg needs --reference");
    }
    let a = ppm_dir(&p.path("group-a")?)?;
    let b = ppm_dir(&p.path("group-b")?)?;
    let reference = if kind == ReflectionKind::ChannelBrg {
        let data = load_data(p, "reference")?;
        let mut m = [0.0f64; 3];
        for i in 0..data.len() {
            let c = channel_means(&data.image(i)?)?;
            if c.len() != 3 {
                bail!("--reference must hold 3-channel images, got {}", c.len());
            }
            m.iter_mut().zip(&c).for_each(|(t, v)| *t += v / data.len() as f64);
        }
        Some(m)
    } else {
        None
    };
    let images = |g: &[(String, Tensor)]| g.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>();
    let report = reflection_metrics(&images(&a), &images(&b), kind, reference)?;
    let out = prepare_out(p)?;
    write(&out.join("reflect.csv"), report.to_csv().as_bytes())?;
    let mut values = String::from("group,file,value\n");
    for (group, files) in report.groups.iter().zip([&a, &b]) {
        for ((name, _), v) in files.iter().zip(&group.values) {
            let _ = writeln!(values, "{},{name},{v}", group.name);
        }
    }
    write(&out.join("values.csv"), values.as_bytes())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn snapshots(p: &Params) -> Result<()> {
    let cfg = am_config(p)?;
    require_stats(p, &cfg)?;
    let units: Vec<usize> = p.list("unit")?;
    let pattern = p.str("ckpt-glob")?;
    let mut paths: Vec<PathBuf> = glob::glob(pattern).with_context(|| format!("--ckpt-glob {pattern}"))?.collect::<Result<_, _>>()?;
    paths.sort();
    if paths.len() < 2 {
        bail!("--ckpt-glob {pattern} matches {} checkpoints; a series needs at least 2", paths.len());
    }
    let checkpoints = paths
        .iter()
        .map(|f| NetworkInstance::load(f).with_context(|| format!("loading checkpoint {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let gen = load_net(p, "gen")?;
    let stats = load_stats(p)?;
    let report = snapshot_report(&checkpoints, p.str("layer")?, &units, &gen, stats.as_ref(), &cfg)?;
    let out = prepare_out(p)?;
    write(&out.join("snapshots.csv"), report.to_csv().as_bytes())?;
    for (ckpt, m) in checkpoints.iter().zip(&report.montages) {
        write(&out.join(format!("montage_{:06}.ppm", ckpt.meta.iteration)), &encode_ppm(m)?)?;
    }
    for (ckpt, mean) in checkpoints.iter().zip(report.mean_activation_per_checkpoint()) {
        println!("iteration {}: mean activation {mean}", ckpt.meta.iteration);
    }
    Ok(())
}

fn transfer(p: &Params) -> Result<()> {
    let cfg = am_config(p)?;
    require_stats(p, &cfg)?;
    let jobs: usize = p.get("jobs")?;
    let batch: usize = p.get("eval-batch")?;
    let layer = p.str("layer")?;
    let target = load_net(p, "target")?;
    let units: Vec<usize> = if p.str("unit")? == "all" { (0..target.layer_width(layer)?).collect() } else { p.list("unit")? };
    let gen = load_net(p, "gen")?;
    let stats = load_stats(p)?;
    let data = load_data(p, "data")?;
    let (_, val) = data.split(p.get("val-fraction")?, cfg.seed)?;
    let synth = Synth { phi: &target, layer, generator: &gen, stats: stats.as_ref() };
    let report = generalization_score(&synth, &units, &cfg, &val, batch, jobs)?;
    let out = prepare_out(p)?;
    write(&out.join("transfer.csv"), report.to_csv().as_bytes())?;
    write_unit_results(&out, &report.syntheses, &target)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| v.to_string());
    let summary = format!("median_percentile={}\nmean_percentile={}\n", fmt(report.median_percentile()), fmt(report.mean_percentile()));
    write(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn modify_data(p: &Params) -> Result<()> {
    let seed = p.seed()?;
    let kind = p.str("kind")?;
    let modification = match kind {
        "quarter_shuffle" => Some(Modification::QuarterShuffle(match p.str("permutation")? {
            "random" => Permutation::Random { seed },
            digits => {
                let d: Vec<usize> = digits.chars().map(|c| c.to_digit(10).map(|v| v as usize)).collect::<Option<_>>().ok_or_else(|| anyhow!("--permutation {digits}: expected random or four digits"))?;
                Permutation::Fixed(d.try_into().map_err(|_| anyhow!("--permutation {digits}: expected four digits"))?)
            }
        })),
        "channel_brg" => Some(Modification::ChannelBrg),
        "gaussian_blur" => Some(Modification::GaussianBlur { radius: p.get("radius")? }),
        "identity" => None,
        other => bail!("--kind {other}: expected quarter_shuffle, channel_brg, gaussian_blur or identity"),
    };
    if let Some(m) = &modification {
        m.validate()?;
    }
    let palette: Option<[f32; 3]> = p
        .opt_str("palette")
        .map(|_| p.list::<f32>("palette")?.try_into().map_err(|_| anyhow!("--palette takes three comma-separated values")))
        .transpose()?;
    let source = p.path("in")?;
    let out = p.path("out")?;
    if out == source {
        bail!("--out must differ from --in");
    }
    let mut data = load_data(p, "in")?;
    if let Some(pal) = palette {
        data = data.colorize(pal)?;
    }
    let result = match &modification {
        Some(m) => build_modified_dataset(&data, m)?,
        None => data,
    };
    result.save(&out)?;
    write(&out.join("manifest.txt"), p.manifest().as_bytes())?;
    println!("{kind}: {} images in {} classes", result.len(), result.num_classes());
    Ok(())
}

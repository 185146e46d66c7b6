use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use quadmix::aggregate::{entropy_weights, mmd_align, spatial_aggregate, temporal_aggregate, CategoryFeatureBank};
use quadmix::bench::{adaptation_checks, run_benchmark};
use quadmix::config::{Mode, RunConfig};
use quadmix::flow::generate_pseudo_label;
use quadmix::mixer::{extract_template, mix, Domain, MixBundle};
use quadmix::model::ToyModel;
use quadmix::shiftworld::{generate, read_dataset, write_dataset, ShiftWorld};
use quadmix::tensor::{emit_image, read_tensor, write_tensor, FlowField, FrameStack, ImageSource, LabelMap, Tensor};
use quadmix::train::{evaluate_miou, trace_csv, train, Variant};
use quadmix::{Error, Result};

#[derive(Parser)]
#[command(name = "quadmix", version, about = "Video domain adaptation toolkit on the ShiftWorld benchmark")]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed for `gen` and the training seed for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Video,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the ShiftWorld dataset as QTNS files plus a manifest.
    Gen,
    /// Paste the given categories of a template sample into a base sample.
    Mix {
        /// Sample directory: frames.qtns, labels.qtns, [flow.qtns].
        #[arg(long)]
        base: PathBuf,
        /// Sample directory; video mode also needs labels_prev.qtns.
        #[arg(long)]
        template: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        categories: Vec<u16>,
        #[arg(long, value_enum, default_value = "source")]
        base_domain: DomainArg,
        #[arg(long, value_enum, default_value = "target")]
        template_domain: DomainArg,
    },
    /// Filtered pseudo-label from K×H×W logits carried along a flow.
    Pseudo {
        #[arg(long)]
        logits: PathBuf,
        /// H×W×2 flow; zero flow when omitted.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Category feature bank from per-timestep C×H×W features.
    Aggregate {
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        /// Labels in the geometry of the aggregated frame.
        #[arg(long)]
        labels: PathBuf,
        /// Another `aggregate` output directory to align against.
        #[arg(long)]
        align_with: Option<PathBuf>,
    },
    /// Train one variant, or the benchmark grid when the config lists variants.
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
        /// Dataset directory written by `gen`; generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Target-test IoU of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// PPM previews of a sample directory or a single QTNS tensor.
    Viz {
        #[arg(long)]
        input: PathBuf,
    },
}

fn io_err(source: std::io::Error) -> Error {
    Error::Io { offset: 0, source }
}

fn load(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    read_tensor(BufReader::new(f))
}

fn save(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor(t, BufWriter::new(File::create(path).map_err(io_err)?))?;
    Ok(())
}

fn save_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err)
}

fn save_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    save_text(path, &(serde_json::to_string_pretty(value).expect("json") + "\n"))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Video => Mode::Video,
            ModeArg::Image => Mode::Image,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<ShiftWorld> {
    match data.map(Path::to_path_buf).or_else(|| cfg.io.data_dir.as_ref().map(PathBuf::from)) {
        Some(dir) => read_dataset(&dir),
        None => generate(&cfg.dataset),
    }
}

struct Sample {
    frames: FrameStack,
    labels: LabelMap,
    flow: Option<FlowField>,
    labels_prev: Option<LabelMap>,
}

fn read_sample(dir: &Path, k: usize) -> Result<Sample> {
    let optional = |name: &str| -> Result<Option<Tensor>> {
        let p = dir.join(name);
        if p.exists() {
            load(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(Sample {
        frames: FrameStack::new(load(&dir.join("frames.qtns"))?)?,
        labels: LabelMap::new(load(&dir.join("labels.qtns"))?, k)?,
        flow: optional("flow.qtns")?.map(FlowField::new).transpose()?,
        labels_prev: optional("labels_prev.qtns")?.map(|t| LabelMap::new(t, k)).transpose()?,
    })
}

fn cmd_gen(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
    }
    write_dataset(&generate(&cfg.dataset)?, &cli.out)
}

fn cmd_mix(cli: &Cli, cfg: &RunConfig, base: &Path, template: &Path, categories: &[u16], bd: Domain, td: Domain) -> Result<()> {
    let k = cfg.dataset.num_categories;
    let b = read_sample(base, k)?;
    let t = read_sample(template, k)?;
    let video = cfg.mode == Mode::Video;
    if video != b.flow.is_some() || video != t.flow.is_some() {
        return Err(Error::Format(format!(
            "{} mode: samples {} flow.qtns",
            if video { "video" } else { "image" },
            if video { "need" } else { "must not have" }
        )));
    }
    let tmpl = extract_template(&t.frames, &t.labels, t.flow.as_ref(), t.labels_prev.as_ref(), categories, td)?;
    let mixed = mix(&MixBundle::raw(b.frames, b.labels, b.flow, bd)?, &tmpl)?;
    save(&cli.out.join("frames.qtns"), mixed.frames().tensor())?;
    save(&cli.out.join("labels.qtns"), mixed.label().tensor())?;
    if let Some(f) = mixed.flow() {
        save(&cli.out.join("flow.qtns"), f.tensor())?;
    }
    save(&cli.out.join("provenance.qtns"), mixed.provenance())?;
    save_json(&cli.out.join("bundle.json"), &json!({ "tag": mixed.tag().notation() }))
}

fn cmd_pseudo(cli: &Cli, cfg: &RunConfig, logits: &Path, flow: Option<&Path>) -> Result<()> {
    let logits = load(logits)?;
    let (h, w) = match *logits.shape() {
        [_, h, w] => (h, w),
        ref s => return Err(Error::Format(format!("logits must be K×H×W, got {s:?}"))),
    };
    let flow = match flow {
        Some(p) => FlowField::new(load(p)?)?,
        None => FlowField::zeros(h, w),
    };
    let labels = generate_pseudo_label(&logits, &flow, &cfg.mixing.pseudo())?;
    save(&cli.out.join("pseudo_label.qtns"), labels.tensor())?;
    save_json(
        &cli.out.join("pseudo_label.json"),
        &json!({ "ignored": labels.ignore_count(), "pixels": h * w }),
    )
}

fn read_bank(dir: &Path) -> Result<CategoryFeatureBank> {
    let text = std::fs::read_to_string(dir.join("bank.json")).map_err(io_err)?;
    let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("bank.json: {e}")))?;
    let valid = meta["valid"]
        .as_array()
        .ok_or_else(|| Error::Format("bank.json lacks a valid list".into()))?
        .iter()
        .map(|v| v.as_bool().ok_or_else(|| Error::Format("valid entries must be booleans".into())))
        .collect::<Result<Vec<bool>>>()?;
    CategoryFeatureBank::new(load(&dir.join("bank.qtns"))?, valid)
}

fn cmd_aggregate(cli: &Cli, cfg: &RunConfig, features: &[PathBuf], labels: &Path, other: Option<&Path>) -> Result<()> {
    let feats = features.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let labels = LabelMap::new(load(labels)?, cfg.dataset.num_categories)?;
    let banks = feats.iter().map(|f| spatial_aggregate(f, &labels)).collect::<Result<Vec<_>>>()?;
    let weights = entropy_weights(&feats.iter().collect::<Vec<_>>())?;
    let bank = temporal_aggregate(&banks.iter().collect::<Vec<_>>(), &weights)?;
    save(&cli.out.join("bank.qtns"), bank.means())?;
    save(&cli.out.join("weights.qtns"), &weights)?;
    save_json(&cli.out.join("bank.json"), &json!({ "valid": bank.valid() }))?;
    if let Some(dir) = other {
        let out = mmd_align(&read_bank(dir)?, &bank, &cfg.aggregation)?;
        save_json(&cli.out.join("mmd.json"), &json!({ "loss": out.loss, "no_overlap": out.no_overlap }))?;
    }
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, variant: &str, data: Option<&Path>) -> Result<()> {
    let world = dataset(cfg, data)?;
    if !cfg.benchmark.variants.is_empty() {
        let report = run_benchmark(&world, cfg, &cfg.benchmark.variants, &cfg.benchmark.seeds)?;
        save_text(&cli.out.join("report.csv"), &report.to_csv())?;
        save_text(&cli.out.join("report.txt"), &report.to_table())?;
        let mut lines = String::new();
        for c in adaptation_checks(&report) {
            lines.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        save_text(&cli.out.join("acceptance.txt"), &lines)?;
        print!("{}{}", report.to_table(), lines);
        return Ok(());
    }
    let variant: Variant = variant.parse()?;
    let seed = cli.seed.unwrap_or(0);
    let out = train(&world, cfg, variant, seed)?;
    out.model.save(&cli.out.join("model"))?;
    save_text(&cli.out.join("trace.csv"), &trace_csv(&out.trace))?;
    save_json(
        &cli.out.join("report.json"),
        &json!({ "variant": variant, "seed": seed, "miou": out.report.miou, "per_category": out.report.per_category }),
    )?;
    println!("{variant} seed {seed}: target mIoU {:.4}", out.report.miou);
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig, model: &Path, data: Option<&Path>) -> Result<()> {
    let model = ToyModel::load(model)?;
    let world = dataset(cfg, data)?;
    let report = evaluate_miou(&model, &world.target_test, cfg.mode)?;
    save_json(
        &cli.out.join("eval.json"),
        &json!({ "miou": report.miou, "per_category": report.per_category }),
    )?;
    println!("target mIoU {:.4}", report.miou);
    Ok(())
}

fn write_ppm(path: &Path, image: ImageSource<'_>) -> Result<()> {
    emit_image(image, BufWriter::new(File::create(path).map_err(io_err)?))?;
    Ok(())
}

/// Writes previews for one tensor, inferring what it holds from dtype and shape.
fn viz_tensor(out: &Path, stem: &str, t: &Tensor) -> Result<()> {
    let shape = t.shape().to_vec();
    match (t.as_f32().is_ok(), shape.as_slice()) {
        (false, [_, _]) => {
            let t = match t.as_u8() {
                Ok(v) => Tensor::from_u16(shape.clone(), v.iter().map(|&x| x as u16).collect())?,
                Err(_) => t.clone(),
            };
            write_ppm(&out.join(format!("{stem}.ppm")), ImageSource::Labels(&LabelMap::new(t, 255)?))
        }
        (false, [n, _, _, ..]) => {
            for i in 0..*n {
                viz_tensor(out, &format!("{stem}_{i}"), &t.outer(i)?)?;
            }
            Ok(())
        }
        (true, [_, _, 2]) => write_ppm(&out.join(format!("{stem}.ppm")), ImageSource::Flow(&FlowField::new(t.clone())?)),
        (true, [1 | 3, _, _]) => write_ppm(&out.join(format!("{stem}.ppm")), ImageSource::Frame(t)),
        (true, [n, _, _, _, ..]) => {
            for i in 0..*n {
                viz_tensor(out, &format!("{stem}_{i}"), &t.outer(i)?)?;
            }
            Ok(())
        }
        _ => Err(Error::Format(format!("cannot preview a tensor of shape {shape:?}"))),
    }
}

fn cmd_viz(cli: &Cli, input: &Path) -> Result<()> {
    if input.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "qtns"))
            .collect();
        names.sort();
        for p in names {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            viz_tensor(&cli.out, &stem, &load(&p)?)?;
        }
        Ok(())
    } else {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "tensor".into());
        viz_tensor(&cli.out, &stem, &load(input)?)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(io_err)?;
    match &cli.command {
        Command::Gen => cmd_gen(cli, &mut cfg)?,
        Command::Mix {
            base,
            template,
            categories,
            base_domain,
            template_domain,
        } => cmd_mix(cli, &cfg, base, template, categories, (*base_domain).into(), (*template_domain).into())?,
        Command::Pseudo { logits, flow } => cmd_pseudo(cli, &cfg, logits, flow.as_deref())?,
        Command::Aggregate {
            features,
            labels,
            align_with,
        } => cmd_aggregate(cli, &cfg, features, labels, align_with.as_deref())?,
        Command::Train { variant, data } => cmd_train(cli, &cfg, variant, data.as_deref())?,
        Command::Eval { model, data } => cmd_eval(cli, &cfg, model, data.as_deref())?,
        Command::Viz { input } => cmd_viz(cli, input)?,
    }
    save_text(&cli.out.join("config.resolved.json"), &cfg.to_json())
}

/// 1: usage or configuration, 2: data or format, 3: training divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Training { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("quadmix: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

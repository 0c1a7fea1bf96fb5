use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bgnet::bench;
use bgnet::bilateral::{compute_guide, luminance_guide};
use bgnet::gradcheck::{standard_suite, GradCheckOptions, SUITE_OPS};
use bgnet::io::{load_image, load_model, load_pairs, save_gray, save_image, save_model};
use bgnet::pipeline::{predict_grid, render_with};
use bgnet::reference::{make_dataset, OperatorKind, OperatorSpec, Source};
use bgnet::trainer::{evaluate, mean, train, Augment, TrainConfig};
use bgnet::{Ablation, ModelParams, NetConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bgnet", version, about = "Learned bilateral-grid image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateArg {
    NoGlobal,
    HardSplat,
    LumaGuide,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize input/target pairs for a reference operator.
    MakeData {
        /// identity, gamma_sat, vignette_tone, cross_channel, guide_dependent
        #[arg(long, default_value = "identity")]
        operator: String,
        /// key=value operator file; overrides --operator.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Side of synthetic images.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Directory of source images instead of synthetic scenes.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a manifest of pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest; by default a tenth of --data is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Stop after this many steps instead of counting epochs.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 512)]
        crop: usize,
        #[arg(long)]
        no_augment: bool,
        #[arg(long, default_value_t = 16)]
        grid_size: usize,
        #[arg(long, default_value_t = 8)]
        grid_depth: usize,
        #[arg(long, default_value_t = 1.0)]
        channel_mult: f64,
        /// Side of the low-resolution input; must be grid size times a power of two.
        #[arg(long, default_value_t = 256)]
        lowres: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        #[arg(long, default_value = "model.bgnet")]
        out: PathBuf,
        /// JSON-lines metrics log; stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Reserved; pixels are used as stored.
        #[arg(long)]
        linearize: bool,
    },
    /// Enhance one image.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write the guidance map as a grayscale PNG.
        #[arg(long)]
        dump_guide: Option<PathBuf>,
        /// Write one grayscale PNG per coefficient and depth slice.
        #[arg(long)]
        dump_coeffs: Option<PathBuf>,
        /// Reserved; pixels are used as stored.
        #[arg(long)]
        linearize: bool,
    },
    /// Mean and median PSNR over a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time coefficient prediction and full-resolution rendering.
    Bench {
        /// Model to time; a freshly initialized default model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Comma-separated sizes in megapixels.
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES.to_vec())]
        sizes: Vec<f64>,
    },
    /// Finite-difference check of every differentiable operation in fp64.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn net_config(grid_size: usize, grid_depth: usize, channel_mult: f64, lowres: usize, ablate: Option<AblateArg>) -> Result<NetConfig> {
    if grid_size == 0 || lowres % grid_size != 0 || !(lowres / grid_size).is_power_of_two() || lowres == grid_size {
        bail!("--lowres {lowres} must be --grid-size {grid_size} times a power of two (at least 2)");
    }
    let ablation = match ablate {
        None => Ablation::default(),
        Some(AblateArg::NoGlobal) => Ablation { no_global: true, ..Default::default() },
        Some(AblateArg::HardSplat) => Ablation { hard_splat: true, ..Default::default() },
        Some(AblateArg::LumaGuide) => Ablation { luma_guide: true, ..Default::default() },
    };
    let cfg = NetConfig {
        n_lowlevel: (lowres / grid_size).trailing_zeros() as usize,
        grid_w: grid_size,
        grid_h: grid_size,
        grid_depth,
        channel_multiplier: channel_mult,
        lowres_size: lowres,
        ablation,
        ..NetConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn dump_coeffs(dir: &Path, grid: &bgnet::Tensor<f32>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let s = grid.shape();
    let (gh, gw, d, k) = (s[0], s[1], s[2], s[3]);
    let mut sidecar = String::from("depth\tcoeff\tmin\tmax\tfile\n");
    for z in 0..d {
        for c in 0..k {
            let plane: Vec<f32> = (0..gh * gw).map(|i| grid.data()[(i * d + z) * k + c]).collect();
            let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let name = format!("coeff_z{z}_k{c:02}.png");
            save_gray(&dir.join(&name), &plane, gh, gw, lo, hi)?;
            sidecar.push_str(&format!("{z}\t{c}\t{lo}\t{hi}\t{name}\n"));
        }
    }
    fs::write(dir.join("ranges.tsv"), sidecar).context("writing ranges.tsv")?;
    Ok(())
}

fn reject_linearize(on: bool) -> Result<()> {
    if on {
        bail!("--linearize is reserved and not implemented");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData {
            operator,
            spec,
            out,
            count,
            size,
            source,
            seed,
        } => {
            let spec = match spec {
                Some(p) => OperatorSpec::from_key_values(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => OperatorSpec::preset(OperatorKind::parse(&operator)?),
            };
            let source = match source {
                Some(dir) => Source::Directory(dir),
                None => Source::Synthetic { size },
            };
            let ds = make_dataset(&spec, &source, &out, count, seed)?;
            for s in &ds.skipped {
                eprintln!("warning: skipped {s}");
            }
            println!("wrote {} pairs to {}", ds.pairs.len(), ds.manifest.display());
        }
        Command::Train {
            data,
            val,
            epochs,
            steps,
            batch,
            lr,
            crop,
            no_augment,
            grid_size,
            grid_depth,
            channel_mult,
            lowres,
            seed,
            eval_every,
            ablate,
            out,
            metrics,
            linearize,
        } => {
            reject_linearize(linearize)?;
            let net = net_config(grid_size, grid_depth, channel_mult, lowres, ablate)?;
            let cfg = TrainConfig {
                batch_size: batch,
                epochs,
                max_steps: steps,
                lr,
                seed,
                eval_every,
                augment: if no_augment {
                    Augment::none()
                } else {
                    Augment {
                        crop: Some(crop),
                        ..Augment::default()
                    }
                },
                ..TrainConfig::default()
            };
            let pairs = load_pairs(&data)?;
            let val = val.map(|v| load_pairs(&v)).transpose()?;
            let mut sink: Box<dyn Write> = match &metrics {
                Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout()),
            };
            let outcome = train(pairs, val, &cfg, &net, Some(sink.as_mut()))?;
            sink.flush()?;
            save_model(&out, &outcome.model)?;
            match outcome.final_val_psnr() {
                Some(p) => eprintln!("trained {} steps; val PSNR {p:.2} dB; saved {}", outcome.steps, out.display()),
                None => eprintln!("trained {} steps; saved {}", outcome.steps, out.display()),
            }
        }
        Command::Apply {
            model,
            input,
            output,
            dump_guide,
            dump_coeffs: coeff_dir,
            linearize,
        } => {
            reject_linearize(linearize)?;
            let model = load_model(&model)?;
            let img = load_image(&input)?;
            let grid = predict_grid(&model, &img)?;
            let out = render_with(&model, &grid, &img)?;
            save_image(&output, &out)?;
            if let Some(p) = dump_guide {
                let g = if model.config.ablation.luma_guide {
                    luminance_guide(&img)?
                } else {
                    compute_guide(&img, &model.guide_params())?
                };
                save_gray(&p, g.data(), img.shape()[0], img.shape()[1], 0.0, 1.0)?;
            }
            if let Some(dir) = coeff_dir {
                dump_coeffs(&dir, &grid.0)?;
            }
        }
        Command::Eval { model, data } => {
            let model = load_model(&model)?;
            let pairs = load_pairs(&data)?;
            if pairs.is_empty() {
                bail!("empty dataset");
            }
            let scores = evaluate(&model, &pairs)?;
            println!("pairs {}", scores.len());
            println!("mean_psnr {:.4}", mean(&scores));
            println!("median_psnr {:.4}", median(scores));
        }
        Command::Bench {
            model,
            threads,
            repeats,
            sizes,
        } => {
            bench::init_threads(threads)?;
            let model = match model {
                Some(p) => load_model(&p)?,
                None => ModelParams::init(&NetConfig::default(), 0)?,
            };
            let rows = bench::run(&model, &sizes, repeats)?;
            println!("{:>8} {:>6} {:>6} {:>11} {:>11}", "mp", "width", "height", "lowres_ms", "render_ms");
            for r in &rows {
                println!("{:>8} {:>6} {:>6} {:>11.2} {:>11.2}", r.megapixels, r.width, r.height, r.lowres_ms, r.render_ms);
            }
            for (n, q) in bench::quadrupling_ratios(&rows) {
                let verdict = if (3.0..=5.0).contains(&q) { "ok" } else { "outside [3, 5]" };
                println!("ratio t({}MP)/t({n}MP) {q:.3} {verdict}", 4.0 * n);
            }
        }
        Command::GradCheck { instances, seed } => {
            let entries = standard_suite(instances, seed, &GradCheckOptions::default())?;
            let mut failed = false;
            for op in SUITE_OPS {
                let mine: Vec<_> = entries.iter().filter(|e| e.op == op).collect();
                let worst = mine.iter().map(|e| e.report.max_rel_error()).fold(0.0, f64::max);
                let ok = mine.iter().all(|e| e.report.passed());
                failed |= !ok;
                println!("{op:<18} {} instances  max rel err {worst:.3e}  {}", mine.len(), if ok { "ok" } else { "FAIL" });
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

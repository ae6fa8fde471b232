use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use voxgraph::checkpoint;
use voxgraph::config::{ClassSet, Dataset, TrainConfig};
use voxgraph::eval::{evaluate_detector, EvalQuery, Interpolation};
use voxgraph::geometry::build_voxels;
use voxgraph::kitti::{save_detections, KittiDataset, Point, Scene};
use voxgraph::layers::Mode;
use voxgraph::train::Trainer;
use voxgraph::{Error, Graph, Result};

#[derive(Parser)]
#[command(version, about = "Voxel-graph LIDAR 3D object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write metrics.tsv, config.toml and model.vxgc to --out.
    Train(Common),
    /// Report AP of a checkpoint.
    Eval(Common),
    /// Write KITTI-format detections, one file per scene, to --out.
    Infer(Common),
    /// Time each pipeline stage.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file or preset name (car, pedcyc, desk).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// KITTI-layout directory. Synthetic scenes are generated when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split file, or a name resolved to `<dataset>/ImageSets/<name>.txt`.
    /// With synthetic data, `val` draws scenes from a disjoint seed range.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, value_enum)]
    class: Option<ClassSet>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(c) if Path::new(c).is_file() => TrainConfig::load(c)?,
            Some(c) => TrainConfig::preset(c)?,
            None => match self.checkpoint.as_ref().map(|p| p.with_file_name("config.toml")) {
                Some(p) if p.is_file() => TrainConfig::load(p)?,
                _ => TrainConfig::desk(),
            },
        };
        if let Some(class) = self.class {
            config.classes = class;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.dataset.is_some() {
            config.dataset = Dataset::Kitti;
        }
        config.validate()?;
        Ok(config)
    }

    fn scenes(&self, config: &TrainConfig) -> Result<Vec<Scene>> {
        let Some(root) = &self.dataset else {
            let mut config = config.clone();
            if self.split.as_deref() == Some("val") {
                config.seed = config.seed.wrapping_add(1 << 32);
            }
            return config.synthetic_dataset();
        };
        let data = KittiDataset::new(root);
        let split = self.split.as_ref().map(|s| {
            let p = PathBuf::from(s);
            if p.is_file() {
                p
            } else {
                root.join("ImageSets").join(format!("{s}.txt"))
            }
        });
        let ids = data.ids(split.as_deref())?;
        log::info!("loading {} scenes from {}", ids.len(), root.display());
        ids.iter().map(|id| data.load_scene(id)).collect()
    }

    fn trainer(&self, config: &TrainConfig) -> Result<Trainer> {
        let mut trainer = Trainer::new(config.clone())?;
        if let Some(path) = &self.checkpoint {
            checkpoint::load_into(&mut trainer.store, path)?;
        }
        Ok(trainer)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }
}

fn train(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scenes = args.scenes(&config)?;
    let mut trainer = args.trainer(&config)?;
    let out = args.out_dir()?;
    let metrics = out.join("metrics.tsv");
    let mut log = BufWriter::new(File::create(&metrics).map_err(|e| Error::io(&metrics, e))?);
    let start = Instant::now();
    let history = trainer.fit(&scenes, Some(&mut log))?;
    drop(log);
    let config_path = out.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    checkpoint::save(&trainer.store, out.join("model.vxgc"))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "{} steps in {:.1?}: loss {:.4} -> {:.4}",
            history.len(),
            start.elapsed(),
            first.loss.total,
            last.loss.total
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scenes = args.scenes(&config)?;
    let trainer = args.trainer(&config)?;
    let interpolation = Interpolation::from_points(config.ap_points)
        .ok_or_else(|| Error::Config(format!("ap_points must be 11 or 40, got {}", config.ap_points)))?;
    for class in config.classes.classes() {
        let query = EvalQuery {
            class,
            iou_threshold: config.eval_iou,
            difficulty: None,
            interpolation,
        };
        let (ap, _) = evaluate_detector(&trainer.detector, &trainer.store, &scenes, &config.postprocess(), &query)?;
        match ap {
            Some(r) => println!("{} AP@{}: {:.2} ({} ground truths)", class.as_str(), config.eval_iou, r.ap, r.n_gt),
            None => println!("{} AP@{}: no ground truth", class.as_str(), config.eval_iou),
        }
    }
    Ok(())
}

fn infer(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scenes = args.scenes(&config)?;
    let trainer = args.trainer(&config)?;
    let out = args.out_dir()?;
    let post = config.postprocess();
    let mut total = 0;
    for scene in &scenes {
        let dets = trainer.detector.detect(&trainer.store, &scene.points, &post)?;
        total += dets.len();
        save_detections(out, &scene.id, &dets, &scene.calib)?;
    }
    println!("{total} detections over {} scenes in {}", scenes.len(), out.display());
    Ok(())
}

fn bench(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scenes = args.scenes(&config)?;
    let trainer = args.trainer(&config)?;
    let (detector, store) = (&trainer.detector, &trainer.store);
    let post = config.postprocess();
    let mut t = [Duration::ZERO; 4];
    for scene in &scenes {
        let clock = Instant::now();
        let points = detector.crop(&scene.points);
        let xyz: Vec<[f64; 3]> = points.iter().map(Point::xyz).collect();
        let voxels = build_voxels(&xyz, &detector.config.voxels)?;
        t[0] += clock.elapsed();

        let clock = Instant::now();
        let mut g = Graph::new();
        let vg = detector.net.forward(&mut g, store, &points, &voxels, &detector.config.bev)?;
        t[1] += clock.elapsed();

        let clock = Instant::now();
        let head = detector.head.forward(&mut g, store, vg.bev, Mode::Eval)?;
        t[2] += clock.elapsed();

        // The head emits [A, H, W] planes; postprocess wants anchor order.
        let clock = Instant::now();
        let cls = cell_major(g.value(head.cls).data(), g.shape(head.cls));
        let reg = cell_major(g.value(head.reg).data(), g.shape(head.reg));
        detector.postprocess(&cls, &reg, &post);
        t[3] += clock.elapsed();
    }
    let n = scenes.len().max(1) as f64;
    let names = ["voxelize", "voxel graph", "head", "postprocess"];
    for (name, d) in names.iter().zip(t) {
        println!("{name:<12} {:>9.2} ms/scene", d.as_secs_f64() * 1e3 / n);
    }
    println!("{:<12} {:>9.2} ms/scene", "total", t.iter().sum::<Duration>().as_secs_f64() * 1e3 / n);
    Ok(())
}

fn cell_major(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let (c, cells) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for p in 0..cells {
            out[p * c + ch] = data[ch * cells + p];
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

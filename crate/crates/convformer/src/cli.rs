//! Command-line interface: gradient checking, synthetic data export,
//! training, evaluation, the alpha ablation sweep, and attention-map export.

use crate::gradcheck::run_suite;
use crate::io::{
    export_attention, load_checkpoint, load_config, write_bytes_atomic, write_text_atomic,
    AppConfig,
};
use crate::metrics::collapse_report;
use crate::model::SegModel;
use crate::trainer::{
    ablate_alpha, ablation_csv, gen_dataset, history_csv, train, SyntheticSample,
    DEFAULT_ALPHA_GRID,
};
use crate::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "convformer", version, about = "ConvFormer reference implementation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the finite-difference gradient suite and print the report.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as CSV to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic samples and write them as PGM images.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train on the synthetic task; writes history.csv and final.cfrm.
    Train {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out synthetic split.
    Eval {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train one model per alpha and report Dice for each.
    AblateAlpha {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Alpha grid; defaults to 0.2 0.4 0.6 0.8 1.0.
        #[arg(long, num_args = 1..)]
        alphas: Option<Vec<f64>>,
    },
    /// Export per-head attention maps of one layer as PGM images.
    VisualizeAttn {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Query pixel on the token grid; defaults to the grid center.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        col: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            // single machine-parsable line
            let msg = format!("{}", e).replace('\n', " ");
            eprintln!("error: {}", msg);
            1
        }
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(AppConfig::default()),
    }
}

/// Deterministic train/validation split derived from the config and seed.
fn make_splits(cfg: &AppConfig, seed: u64) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let all = gen_dataset(
        cfg.n_train + cfg.n_val,
        cfg.height,
        cfg.width,
        &cfg.data_spec(),
        seed,
    )?;
    let mut train_set = all;
    let val_set = train_set.split_off(cfg.n_train);
    Ok((train_set, val_set))
}

fn image_pgm(sample: &SyntheticSample, mask: bool, num_classes: usize) -> Vec<u8> {
    let (h, w) = (sample.h(), sample.w());
    let mut pgm = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h {
        for j in 0..w {
            let px = if mask {
                (sample.mask[i * w + j] * 255 / (num_classes - 1).max(1)) as u8
            } else {
                (255.0 * sample.image.at3(0, i, j)).round().clamp(0.0, 255.0) as u8
            };
            pgm.push(px);
        }
    }
    pgm
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Gradcheck { seed, out } => {
            let report = run_suite(seed)?;
            print!("{}", report);
            if let Some(path) = out {
                write_text_atomic(&path, &report.to_csv())?;
            }
            Ok(if report.pass() { 0 } else { 1 })
        }
        Cmd::GenData { seed, config, out, count } => {
            let cfg = read_config(&config)?;
            let data = gen_dataset(count, cfg.height, cfg.width, &cfg.data_spec(), seed)?;
            std::fs::create_dir_all(&out)?;
            for (i, s) in data.iter().enumerate() {
                write_bytes_atomic(
                    &out.join(format!("sample{}.pgm", i)),
                    &image_pgm(s, false, cfg.num_classes),
                )?;
                write_bytes_atomic(
                    &out.join(format!("sample{}_mask.pgm", i)),
                    &image_pgm(s, true, cfg.num_classes),
                )?;
            }
            println!("wrote {} samples to {}", count, out.display());
            Ok(0)
        }
        Cmd::Train { seed, config, out } => {
            let cfg = read_config(&config)?;
            let (train_set, val_set) = make_splits(&cfg, seed)?;
            let mut model = SegModel::build(&cfg.model_config(), seed.wrapping_add(1))?;
            std::fs::create_dir_all(&out)?;
            let outcome = train(
                &mut model,
                &train_set,
                &val_set,
                &cfg.train_config(),
                Some(&out),
                seed.wrapping_add(2),
            )?;
            write_text_atomic(&out.join("history.csv"), &history_csv(&outcome.history))?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} steps; final dice {} (history in {})",
                    outcome.steps,
                    last.dice,
                    out.join("history.csv").display()
                );
            }
            Ok(0)
        }
        Cmd::Eval { seed, config, ckpt } => {
            let cfg = read_config(&config)?;
            let (_, val_set) = make_splits(&cfg, seed)?;
            let mut model = SegModel::build(&cfg.model_config(), seed.wrapping_add(1))?;
            load_checkpoint(&mut model, &ckpt)?;
            model.set_mode(crate::tensor::BnMode::Inference);
            let mut dice_sum = 0.0;
            let mut collapse = 0.0;
            for s in &val_set {
                let (logits, attn) = model.forward(&s.image)?;
                let mut per = 0.0;
                for class in 1..cfg.num_classes {
                    let pred = crate::metrics::BinaryMask::from_logits(&logits, class)?;
                    let gt = crate::metrics::BinaryMask::from_labels(
                        &s.mask,
                        s.h(),
                        s.w(),
                        class,
                    )?;
                    per += crate::metrics::dice(&pred, &gt)?;
                }
                dice_sum += per / (cfg.num_classes - 1) as f64;
                collapse = collapse_report(&attn)?.collapse_score;
            }
            println!(
                "dice {} collapse_score {}",
                dice_sum / val_set.len() as f64,
                collapse
            );
            Ok(0)
        }
        Cmd::AblateAlpha { seed, config, out, alphas } => {
            let cfg = read_config(&config)?;
            let grid = alphas.unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec());
            let (train_set, val_set) = make_splits(&cfg, seed)?;
            let rows = ablate_alpha(
                &cfg.model_config(),
                &train_set,
                &val_set,
                &cfg.train_config(),
                &grid,
                seed.wrapping_add(1),
            )?;
            let csv = ablation_csv(&rows);
            print!("{}", csv);
            if let Some(path) = out {
                write_text_atomic(&path, &csv)?;
            }
            Ok(0)
        }
        Cmd::VisualizeAttn { seed, config, ckpt, layer, row, col, out } => {
            let cfg = read_config(&config)?;
            if layer >= cfg.layers {
                return Err(crate::Error::Invalid(format!(
                    "layer {} out of range 0..{}",
                    layer, cfg.layers
                )));
            }
            let (_, val_set) = make_splits(&cfg, seed)?;
            let mut model = SegModel::build(&cfg.model_config(), seed.wrapping_add(1))?;
            load_checkpoint(&mut model, &ckpt)?;
            model.set_mode(crate::tensor::BnMode::Inference);
            let (_, attn) = model.forward(&val_set[0].image)?;
            let field = &attn[layer];
            let grid_h = field.heads[0].field.shape()[0];
            let grid_w = field.heads[0].field.shape()[1];
            let query = (row.unwrap_or(grid_h / 2), col.unwrap_or(grid_w / 2));
            let images = export_attention(field, query)?;
            std::fs::create_dir_all(&out)?;
            for (h, pgm) in images.iter().enumerate() {
                let path = out.join(format!("attn_layer{}_head{}.pgm", layer, h));
                write_bytes_atomic(&path, pgm)?;
                println!("wrote {}", path.display());
            }
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::serialize_config;

    fn tiny_config_file(dir: &std::path::Path) -> PathBuf {
        let cfg = AppConfig {
            c: 1,
            c_m: 4,
            c_q: 4,
            c_h: 8,
            patch_size: 4,
            heads: 1,
            layers: 1,
            num_classes: 2,
            height: 16,
            width: 16,
            epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            max_steps: 2,
            checkpoint_every: 0,
            augment: false,
            n_train: 4,
            n_val: 2,
            r_min: 3.0,
            r_max: 5.0,
            ..AppConfig::default()
        };
        let path = dir.join("tiny.cfg");
        std::fs::write(&path, serialize_config(&cfg)).unwrap();
        path
    }

    #[test]
    fn unknown_subcommand_and_flag_exit_2() {
        assert_eq!(run(["convformer", "frobnicate"]), 2);
        assert_eq!(run(["convformer", "train", "--bogus"]), 2);
        assert_eq!(run(["convformer"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(run(["convformer", "--help"]), 0);
    }

    #[test]
    fn gen_data_writes_pgms() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config_file(dir.path());
        let out = dir.path().join("data");
        let code = run([
            "convformer",
            "gen-data",
            "--seed",
            "3",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--count",
            "2",
        ]);
        assert_eq!(code, 0);
        for i in 0..2 {
            assert!(out.join(format!("sample{}.pgm", i)).exists());
            assert!(out.join(format!("sample{}_mask.pgm", i)).exists());
        }
    }

    #[test]
    fn train_eval_and_visualize_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config_file(dir.path());
        let out = dir.path().join("run");
        let code = run([
            "convformer",
            "train",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("history.csv").exists());
        let ckpt = out.join("final.cfrm");
        assert!(ckpt.exists());
        let code = run([
            "convformer",
            "eval",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let viz = dir.path().join("viz");
        let code = run([
            "convformer",
            "visualize-attn",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--layer",
            "0",
            "--out",
            viz.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(viz.join("attn_layer0_head0.pgm").exists());
        // out-of-range layer is a runtime error, exit 1
        let code = run([
            "convformer",
            "visualize-attn",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--layer",
            "7",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn ablate_alpha_custom_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config_file(dir.path());
        let out = dir.path().join("ablation.csv");
        let code = run([
            "convformer",
            "ablate-alpha",
            "--seed",
            "6",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--alphas",
            "0.5",
        ]);
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines[0], "alpha,dice");
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("0.5,"));
    }
}

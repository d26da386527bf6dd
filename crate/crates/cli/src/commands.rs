use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sparsecomp::autoencoder::{ae_forward, AeConfig};
use sparsecomp::codec::{
    ae_from_bytes, ae_to_bytes, compress, decompress, read_interchange, write_interchange, CompressedImage,
    DictionaryFile, MaskSpec,
};
use sparsecomp::image_io::load_cifar10_limited;
use sparsecomp::masking::mix_seed;
use sparsecomp::metrics::{evaluate_images, QualityReport};
use sparsecomp::trainer::{sweep_lambda, train_dictionary_with, MaskPolicy, TrainerConfig};
use sparsecomp::{Dataset, Dictionary, ImageTensor, LcaParams, MaskKind, Split};

use crate::{Cli, Command, DataArgs, LcaArgs, MaskArg, MethodArg, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::TrainDict {
            data,
            train,
            lca,
            out,
            history,
        } => train_dict(&data, &train, &lca, &out, history.as_deref()),
        Command::TrainAe {
            data,
            ae,
            out,
            history,
        } => {
            let ds = load(&data)?;
            let (h, w, c) = ds.images[0].dims();
            let cfg = AeConfig {
                image: (h, w, c),
                out_channels: ae.code_channels,
                tied_weights: ae.tied_weights,
                learning_rate: ae.lr,
                momentum: ae.momentum,
                batch_size: ae.batch_size,
                epochs: ae.epochs,
                init_seed: ae.seed,
                ..AeConfig::default()
            };
            cfg.validate()?;
            let mut log = history.as_deref().map(csv_writer).transpose()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "epoch,batch,loss")?;
            }
            let mut io_err = None;
            let state = sparsecomp::autoencoder::train_autoencoder_with(&ds, &cfg, |epoch, batch, loss| {
                if let Some(f) = log.as_mut() {
                    if let Err(e) = writeln!(f, "{epoch},{batch},{loss:.6}") {
                        io_err.get_or_insert(e);
                    }
                }
            })?;
            finish(log, io_err)?;
            fs::write(&out, ae_to_bytes(&state.params)?).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "trained autoencoder: code {} values, final batch loss {:.4}",
                state.params.code_size(),
                state.history.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::SweepLambda {
            data,
            train,
            lca,
            lambdas,
            holdout,
            out,
        } => {
            let ds = load(&data)?;
            let held = load_cifar10_limited(&data.data_dir, Split::Test, holdout)?;
            let cfg = trainer_config(&train, &lca)?;
            let rows = sweep_lambda(&ds, &held, &lambdas, &cfg)?;
            let mut csv = String::from("lambda,mean_sparsity,mean_psnr\n");
            for r in &rows {
                csv.push_str(&format!("{},{:.6},{:.4}\n", r.lambda, r.mean_sparsity, r.mean_psnr));
            }
            match out {
                Some(p) => fs::write(&p, &csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Compress {
            data,
            mask,
            seed,
            out_dir,
        } => {
            let ds = load(&data)?;
            fs::create_dir_all(&out_dir)?;
            let (payload, total) = ds
                .images
                .par_iter()
                .enumerate()
                .map(|(i, img)| {
                    let c = compress(img, mask_spec(mask, seed, i))?;
                    let bytes = c.to_bytes()?;
                    let path = out_dir.join(format!("{i:05}.sci"));
                    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
                    Ok((c.payload.len(), bytes.len()))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold((0usize, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
            let raw: usize = ds.images.iter().map(ImageTensor::len).sum();
            eprintln!(
                "compressed {} images: payload ratio {:.4}, file ratio {:.4}",
                ds.len(),
                payload as f64 / raw as f64,
                total as f64 / raw as f64
            );
            Ok(())
        }
        Command::Decompress {
            input_dir,
            dict,
            lca,
            pure_reconstruction,
            method,
            out_dir,
        } => {
            let (dict, params) = load_dict(&dict, &lca)?;
            let files = sci_files(&input_dir)?;
            let compressed = files
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    CompressedImage::from_bytes(&bytes).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let recons = compressed
                .par_iter()
                .map(|c| decompress(c, &dict, &params, !pure_reconstruction))
                .collect::<sparsecomp::Result<Vec<_>>>()?;
            let method = method.unwrap_or_else(|| match compressed.first().map(|c| c.mask) {
                Some(MaskKind::Random { .. }) => "random".into(),
                _ => "checkerboard".into(),
            });
            write_interchange(&out_dir, &recons, None, &method)?;
            Ok(())
        }
        Command::AeRoundtrip { data, model, out_dir } => {
            let ds = load(&data)?;
            let params = ae_from_bytes(&fs::read(&model).with_context(|| format!("reading {}", model.display()))?)?;
            let recons = ds
                .images
                .par_iter()
                .map(|x| ae_forward(&params, x).map(|(_, r)| r))
                .collect::<sparsecomp::Result<Vec<_>>>()?;
            write_interchange(&out_dir, &recons, ds.labels.as_deref(), "bottleneck")?;
            let report = evaluate_images(&ds.images, &recons, "bottleneck")?;
            print!("{}", QualityReport::table(&[report]));
            Ok(())
        }
        Command::Evaluate {
            data,
            original,
            recon,
            csv,
            per_image,
        } => {
            let originals = match &original {
                Some(dir) => read_interchange(dir)?.1,
                None => load(&data)?.images,
            };
            let mut reports = Vec::new();
            for dir in &recon {
                let (entries, images) = read_interchange(dir)?;
                if images.len() > originals.len() || (original.is_some() && images.len() != originals.len()) {
                    bail!(
                        "{}: {} reconstructions for {} originals",
                        dir.display(),
                        images.len(),
                        originals.len()
                    );
                }
                let tag = entries
                    .first()
                    .map(|e| e.method.clone())
                    .unwrap_or_else(|| dir.display().to_string());
                reports.push(evaluate_images(&originals[..images.len()], &images, &tag)?);
            }
            print!("{}", QualityReport::table(&reports));
            if let Some(p) = csv {
                fs::write(&p, QualityReport::summary_csv(&reports))?;
            }
            if let Some(dir) = per_image {
                fs::create_dir_all(&dir)?;
                for r in &reports {
                    fs::write(dir.join(format!("{}.csv", r.method_tag)), r.to_csv())?;
                }
            }
            Ok(())
        }
        Command::ExportRecons {
            data,
            method,
            dict,
            model,
            lca,
            seed,
            pure_reconstruction,
            out_dir,
        } => {
            let ds = load(&data)?;
            let labels = ds.labels.as_deref();
            let (images, tag) = match method {
                MethodArg::Original => (ds.images.clone(), "original"),
                MethodArg::Bottleneck => {
                    let model = model.context("--model is required for the bottleneck method")?;
                    let params = ae_from_bytes(&fs::read(&model).with_context(|| format!("reading {}", model.display()))?)?;
                    let recons = ds
                        .images
                        .par_iter()
                        .map(|x| ae_forward(&params, x).map(|(_, r)| r.clamped()))
                        .collect::<sparsecomp::Result<Vec<_>>>()?;
                    (recons, "bottleneck")
                }
                MethodArg::Checkerboard | MethodArg::Random => {
                    let path = dict.context("--dict is required for the sparse-coding methods")?;
                    let (dict, params) = load_dict(&path, &lca)?;
                    let mask = if method == MethodArg::Random {
                        MaskArg::Random
                    } else {
                        MaskArg::Checkerboard
                    };
                    let recons = ds
                        .images
                        .par_iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let c = compress(x, mask_spec(mask, seed, i))?;
                            decompress(&c, &dict, &params, !pure_reconstruction).map(|r| r.clamped())
                        })
                        .collect::<sparsecomp::Result<Vec<_>>>()?;
                    (recons, if mask == MaskArg::Random { "random" } else { "checkerboard" })
                }
            };
            write_interchange(&out_dir, &images, labels, tag)?;
            eprintln!("wrote {} {tag} images to {}", images.len(), out_dir.display());
            Ok(())
        }
    }
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let ds = load_cifar10_limited(&data.data_dir, data.split, data.limit.unwrap_or(usize::MAX))
        .with_context(|| format!("loading {}", data.data_dir.display()))?;
    if ds.is_empty() {
        bail!("no images selected");
    }
    Ok(ds)
}

fn lca_params(args: &LcaArgs, default_lambda: f64) -> Result<LcaParams> {
    let d = LcaParams::default();
    let p = LcaParams {
        lambda: args.lambda.unwrap_or(default_lambda),
        step: args.step.unwrap_or(d.step),
        iterations: args.iterations.unwrap_or(d.iterations),
        tol: args.tol.unwrap_or(d.tol),
    };
    p.validate()?;
    Ok(p)
}

fn trainer_config(train: &TrainArgs, lca: &LcaArgs) -> Result<TrainerConfig> {
    let cfg = TrainerConfig {
        atoms: train.atoms,
        patch: (train.patch, train.patch),
        stride: train.stride,
        padding: train.padding,
        learning_rate: train.lr,
        momentum: train.momentum,
        batch_size: train.batch_size,
        epochs: train.epochs,
        mask_policy: match train.mask {
            MaskArg::Checkerboard => MaskPolicy::Checkerboard { phase: 0 },
            MaskArg::Random => MaskPolicy::random(train.seed),
        },
        lca: lca_params(lca, LcaParams::default().lambda)?,
        init_seed: train.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_dict(data: &DataArgs, train: &TrainArgs, lca: &LcaArgs, out: &Path, history: Option<&Path>) -> Result<()> {
    let ds = load(data)?;
    let cfg = trainer_config(train, lca)?;
    let mut log = history.map(csv_writer).transpose()?;
    if let Some(f) = log.as_mut() {
        writeln!(f, "epoch,batch,energy,sparsity,psnr")?;
    }
    let mut io_err = None;
    let state = train_dictionary_with(&ds, &cfg, |r| {
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(
                f,
                "{},{},{:.6},{:.6},{:.4}",
                r.epoch, r.batch, r.energy, r.sparsity, r.psnr
            ) {
                io_err.get_or_insert(e);
            }
        }
    })?;
    finish(log, io_err)?;
    let file = DictionaryFile {
        dict: state.dict,
        lambda: cfg.lca.lambda as f32,
    };
    file.save(out).with_context(|| format!("writing {}", out.display()))?;
    let (h, w, _) = ds.images[0].dims();
    eprintln!(
        "trained {} atoms ({:.1}x overcomplete), {} dead atoms reinitialized",
        file.dict.num_atoms(),
        file.dict.overcompleteness(h, w)?,
        state.dead_atoms_reinitialized
    );
    Ok(())
}

fn load_dict(path: &Path, lca: &LcaArgs) -> Result<(Dictionary<f32>, LcaParams)> {
    let file = DictionaryFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    let params = lca_params(lca, file.lambda as f64)?;
    Ok((file.dict, params))
}

fn mask_spec(mask: MaskArg, seed: u64, index: usize) -> MaskSpec {
    match mask {
        MaskArg::Checkerboard => MaskSpec::Checkerboard { phase: 0 },
        MaskArg::Random => MaskSpec::Random {
            seed: mix_seed(seed, index as u64),
            keep_fraction: 0.5,
        },
    }
}

fn sci_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "sci"));
    files.sort();
    if files.is_empty() {
        bail!("no .sci files in {}", dir.display());
    }
    Ok(files)
}

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn finish(log: Option<BufWriter<fs::File>>, err: Option<std::io::Error>) -> Result<()> {
    if let Some(e) = err {
        return Err(e).context("writing history");
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    Ok(())
}

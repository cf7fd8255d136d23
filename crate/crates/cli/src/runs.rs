//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mno_core::bench::{bench_csv, sweep_m_global, sweep_n, BenchDims, BenchModule};
use mno_core::datagen::{generate_corpus, GenSpec, Generator};
use mno_core::geometry::{knn_graph, normalize_sample, PointSample};
use mno_core::io;
use mno_core::metrics::FieldGrouping;
use mno_core::model::{forward_sample, MnoConfig, MnoModel, ModuleMask};
use mno_core::optim::AdamWHyper;
use mno_core::train::{
    ablate, ablate_to_csv, evaluate, gradient_check, history_to_csv, train, LossKind, TrainConfig,
    TrainOutcome,
};
use mno_core::{Error, Precision, Real, Result};

use crate::args::*;
use crate::util::{load_config_file, lookup, parse_usize_list, resolve, StagedDir};

fn write_file_atomic(path: &Path, contents: &str) -> Result<()> {
    if path.exists() {
        return Err(Error::argument(format!("output file '{}' already exists", path.display())));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let generator = Generator::parse(&args.generator)?;
    let base = GenSpec {
        generator,
        n: args.n,
        seed: args.seed,
        noise_std: args.noise,
        freestream: args.freestream,
    };
    base.validate()?;
    let staged = StagedDir::create(&args.out)?;
    let names = generate_corpus(&base, args.count, staged.path())?;
    let out = staged.commit()?;
    println!(
        "gen-data: wrote {} {} files and manifest.csv under {}",
        names.len(),
        generator.as_str(),
        out.display()
    );
    Ok(())
}

/// Model/architecture settings resolved from defaults, config file, flags.
pub struct ResolvedConfig {
    pub model: MnoConfig,
    pub tcfg: TrainConfig,
}

pub fn resolve_configs(
    model_flags: &ModelFlags,
    train_flags: &TrainFlags,
    feature_dim: usize,
    output_dim: usize,
) -> Result<ResolvedConfig> {
    let entries = match &model_flags.config {
        Some(path) => load_config_file(path)?,
        None => Vec::new(),
    };
    let defaults = MnoConfig::new(feature_dim, output_dim);
    let mask = match &model_flags.mask {
        Some(m) => ModuleMask::parse(m)?,
        None => match lookup(&entries, "model.mask") {
            Some(m) => ModuleMask::parse(m)?,
            None => ModuleMask::ALL,
        },
    };
    let model = MnoConfig {
        blocks: resolve(model_flags.blocks, &entries, "model.blocks", defaults.blocks)?,
        latent_dim: resolve(model_flags.d, &entries, "model.latent_dim", defaults.latent_dim)?,
        modes: resolve(model_flags.m, &entries, "model.modes", defaults.modes)?,
        heads: resolve(model_flags.heads, &entries, "model.heads", defaults.heads)?,
        k: resolve(model_flags.k, &entries, "model.k", defaults.k)?,
        mask,
        feature_dim,
        output_dim,
    };
    model.validate()?;

    let grouping = match &train_flags.grouping {
        Some(g) => FieldGrouping::parse(g)?,
        None => match lookup(&entries, "train.grouping") {
            Some(g) => FieldGrouping::parse(g)?,
            None => FieldGrouping::single("field", output_dim),
        },
    };
    grouping.validate(output_dim)?;
    let precision = match &train_flags.precision {
        Some(p) => Precision::parse(p)
            .ok_or_else(|| Error::argument(format!("unknown precision '{p}'")))?,
        None => match lookup(&entries, "train.precision") {
            Some(p) => Precision::parse(p)
                .ok_or_else(|| Error::argument(format!("unknown precision '{p}'")))?,
            None => Precision::F32,
        },
    };
    let mut tcfg = TrainConfig::new(grouping);
    tcfg.epochs = resolve(train_flags.epochs, &entries, "train.epochs", tcfg.epochs)?;
    tcfg.batch_size = resolve(train_flags.batch, &entries, "train.batch_size", tcfg.batch_size)?;
    tcfg.max_lr = resolve(train_flags.max_lr, &entries, "train.max_lr", tcfg.max_lr)?;
    tcfg.seed = resolve(train_flags.seed, &entries, "train.seed", tcfg.seed)?;
    tcfg.precision = precision;
    tcfg.loss = LossKind::parse(
        lookup(&entries, "train.loss").unwrap_or("rl2"),
    )?;
    tcfg.hyper = AdamWHyper {
        beta1: resolve(None, &entries, "train.beta1", tcfg.hyper.beta1)?,
        beta2: resolve(None, &entries, "train.beta2", tcfg.hyper.beta2)?,
        eps: resolve(None, &entries, "train.eps", tcfg.hyper.eps)?,
        weight_decay: resolve(
            train_flags.weight_decay,
            &entries,
            "train.weight_decay",
            tcfg.hyper.weight_decay,
        )?,
    };
    tcfg.validate()?;
    Ok(ResolvedConfig { model, tcfg })
}

fn load_dataset(dir: &Path) -> Result<Vec<PointSample>> {
    let samples = io::read_pointset_dir(dir)?;
    Ok(samples)
}

fn input_hashes(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "mno1").unwrap_or(false))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            Ok((
                format!("input.{}", p.file_name().unwrap().to_string_lossy()),
                io::file_sha256(p)?,
            ))
        })
        .collect()
}

fn run_train_typed<T: Real>(
    model_config: MnoConfig,
    tcfg: &TrainConfig,
    train_set: &[PointSample],
    val_set: Option<&[PointSample]>,
    staged: &Path,
) -> Result<(TrainOutcome<T>, Vec<(String, String)>)> {
    let model = MnoModel::<T>::init(model_config.clone(), tcfg.seed)?;
    println!(
        "train: {} params, {} train samples, {} val samples, {} epochs",
        model.param_count(),
        train_set.len(),
        val_set.map(|v| v.len()).unwrap_or(0),
        tcfg.epochs
    );
    let outcome = train(model, train_set, val_set, tcfg)?;

    fs::write(staged.join("history.csv"), history_to_csv(&outcome.history))?;
    let extra = tcfg.to_manifest();
    io::save_checkpoint(
        &staged.join("model.ckpt"),
        &model_config,
        &outcome.model.params.cast::<f32>(),
        &outcome.stats,
        &extra,
    )?;
    io::save_checkpoint(
        &staged.join("model.best.ckpt"),
        &model_config,
        &outcome.best_params.cast::<f32>(),
        &outcome.stats,
        &extra,
    )?;
    let mut artifacts = vec![
        ("artifact.history.csv".to_string(), io::file_sha256(&staged.join("history.csv"))?),
        ("artifact.model.ckpt".to_string(), io::file_sha256(&staged.join("model.ckpt"))?),
        (
            "artifact.model.best.ckpt".to_string(),
            io::file_sha256(&staged.join("model.best.ckpt"))?,
        ),
    ];

    if let Some(vs) = val_set {
        if !vs.is_empty() {
            let best = MnoModel::<T> {
                config: model_config.clone(),
                params: outcome.best_params.clone(),
            };
            let report = evaluate(&best, &outcome.stats, vs, &tcfg.grouping)?;
            fs::write(staged.join("metrics.csv"), report.to_csv())?;
            artifacts.push((
                "artifact.metrics.csv".to_string(),
                io::file_sha256(&staged.join("metrics.csv"))?,
            ));
            for (name, r, m) in &report.rows {
                println!("val: {name} rl2={r:.6} mae={m:.6}");
            }
        }
    }
    Ok((outcome, artifacts))
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    let all = load_dataset(&args.data)?;
    println!(
        "data: {} samples from {} (F={}, O={})",
        all.len(),
        args.data.display(),
        all[0].feature_dim(),
        all[0].target_dim()
    );
    let resolved = resolve_configs(&args.model, &args.train, all[0].feature_dim(), all[0].target_dim())?;

    // Validation split: explicit directory wins; otherwise a deterministic
    // tail fraction of the (name-sorted) dataset.
    let external_val = match &args.val_data {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let (train_set, val_set): (&[PointSample], Option<&[PointSample]>) = match &external_val {
        Some(v) => (&all, Some(v.as_slice())),
        None => {
            let n_val = ((all.len() as f64) * args.val_frac).ceil() as usize;
            if n_val == 0 || n_val >= all.len() {
                (&all, None)
            } else {
                let split = all.len() - n_val;
                (&all[..split], Some(&all[split..]))
            }
        }
    };

    let staged = StagedDir::create(&args.out)?;
    let artifacts = match resolved.tcfg.precision {
        Precision::F32 => {
            run_train_typed::<f32>(resolved.model.clone(), &resolved.tcfg, train_set, val_set, staged.path())?.1
        }
        Precision::F64 => {
            run_train_typed::<f64>(resolved.model.clone(), &resolved.tcfg, train_set, val_set, staged.path())?.1
        }
    };

    let mut manifest = io::config_to_manifest(&resolved.model);
    manifest.extend(resolved.tcfg.to_manifest());
    manifest.push(("data.dir".to_string(), args.data.display().to_string()));
    manifest.extend(input_hashes(&args.data)?);
    manifest.extend(artifacts);
    io::write_manifest(&manifest, &staged.path().join("manifest.txt"))?;

    let out = staged.commit()?;
    println!(
        "train: done in {:.1}s, artifacts under {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&args.checkpoint)?;
    let samples = load_dataset(&args.data)?;
    let grouping = match &args.grouping {
        Some(g) => FieldGrouping::parse(g)?,
        None => match io::manifest_get(&ckpt.manifest, "train.grouping") {
            Some(g) => FieldGrouping::parse(g)?,
            None => FieldGrouping::single("field", ckpt.config.output_dim),
        },
    };
    let model = MnoModel::<f32> { config: ckpt.config.clone(), params: ckpt.params.clone() };
    let report = evaluate(&model, &ckpt.stats, &samples, &grouping)?;

    let staged = StagedDir::create(&args.out)?;
    fs::write(staged.path().join("metrics.csv"), report.to_csv())?;
    let mut manifest = io::config_to_manifest(&ckpt.config);
    manifest.push(("eval.checkpoint".into(), args.checkpoint.display().to_string()));
    manifest.push(("eval.checkpoint_sha256".into(), io::file_sha256(&args.checkpoint)?));
    manifest.push(("eval.grouping".into(), grouping.format()));
    manifest.extend(input_hashes(&args.data)?);
    io::write_manifest(&manifest, &staged.path().join("manifest.txt"))?;
    let out = staged.commit()?;

    for (name, r, m) in &report.rows {
        println!("eval: {name} rl2={r:.6} mae={m:.6}");
    }
    println!("eval: {} samples, report under {}", samples.len(), out.display());
    Ok(())
}

pub fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let started = Instant::now();
    let all = load_dataset(&args.data)?;
    let resolved = resolve_configs(&args.model, &args.train, all[0].feature_dim(), all[0].target_dim())?;

    let masks: Vec<ModuleMask> = args
        .masks
        .split(',')
        .filter(|s| !s.is_empty())
        .map(ModuleMask::parse)
        .collect::<Result<Vec<_>>>()?;
    if masks.is_empty() {
        return Err(Error::argument("ablate: no masks given"));
    }

    let external_test = match &args.test_data {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let (train_set, test_set): (&[PointSample], &[PointSample]) = match &external_test {
        Some(t) => (&all, t.as_slice()),
        None => {
            let n_test = ((all.len() as f64) * 0.1).ceil() as usize;
            if n_test == 0 || n_test >= all.len() {
                return Err(Error::argument(
                    "ablate: dataset too small to split a test set; pass --test-data",
                ));
            }
            let split = all.len() - n_test;
            (&all[..split], &all[split..])
        }
    };
    println!(
        "ablate: {} masks, {} train / {} test samples",
        masks.len(),
        train_set.len(),
        test_set.len()
    );

    let rows = match resolved.tcfg.precision {
        Precision::F32 => ablate::<f32>(&resolved.model, &resolved.tcfg, train_set, None, test_set, &masks)?,
        Precision::F64 => ablate::<f64>(&resolved.model, &resolved.tcfg, train_set, None, test_set, &masks)?,
    };
    for (mask, report) in &rows {
        let cells: Vec<String> = report
            .rows
            .iter()
            .map(|(n, r, _)| format!("rl2_{n}={r:.6}"))
            .collect();
        println!("ablate: {:<22} {}", mask.label(), cells.join(" "));
    }

    let staged = StagedDir::create(&args.out)?;
    fs::write(staged.path().join("ablation.csv"), ablate_to_csv(&rows))?;
    let mut manifest = io::config_to_manifest(&resolved.model);
    manifest.extend(resolved.tcfg.to_manifest());
    manifest.push(("ablate.masks".into(), args.masks.clone()));
    manifest.extend(input_hashes(&args.data)?);
    io::write_manifest(&manifest, &staged.path().join("manifest.txt"))?;
    let out = staged.commit()?;
    println!(
        "ablate: done in {:.1}s, table under {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let sample = match &args.data {
        Some(path) => io::read_pointset(path)?,
        None => mno_core::datagen::generate(&GenSpec::new(Generator::SphereFlow, args.n, args.seed))?,
    };
    let config = MnoConfig {
        blocks: args.blocks,
        latent_dim: args.d,
        modes: args.m,
        heads: args.heads,
        k: args.k,
        mask: ModuleMask::parse(&args.mask)?,
        feature_dim: sample.feature_dim(),
        output_dim: sample.target_dim(),
    };
    // Gradient checking is a float64 mode by contract.
    let report = gradient_check(&config, args.seed, &sample, args.h)?;
    println!(
        "gradcheck: {} parameters checked, max rel err {:.3e} at '{}'",
        report.entries.len(),
        report.max_rel_err,
        report.worst_param
    );
    if let Some(out) = &args.out {
        let mut csv = String::from("param,max_rel_err\n");
        for (p, e) in &report.entries {
            csv.push_str(&format!("{p},{e:e}\n"));
        }
        write_file_atomic(out, &csv)?;
        println!("gradcheck: report written to {}", out.display());
    }
    if report.max_rel_err >= args.tol {
        return Err(Error::numeric(format!(
            "gradient check failed: max rel err {:.3e} >= tolerance {:.1e} (worst '{}')",
            report.max_rel_err, args.tol, report.worst_param
        )));
    }
    Ok(())
}

pub fn bench_cmd(args: BenchArgs) -> Result<()> {
    let module = BenchModule::parse(&args.module)?;
    let dims = BenchDims { n: args.fixed_n, d: args.d, m: args.m, k: args.k, heads: args.heads };
    let (param_name, rows) = match &args.m_list {
        Some(list) => {
            if module != BenchModule::Global {
                return Err(Error::argument("bench: --m-list applies to the global module"));
            }
            let ms = parse_usize_list(list)?;
            ("m", sweep_m_global(&ms, dims, args.reps, args.seed)?)
        }
        None => {
            let ns = parse_usize_list(&args.n)?;
            if ns.is_empty() {
                return Err(Error::argument("bench: empty --n list"));
            }
            ("n", sweep_n(module, &ns, dims, args.reps, args.seed)?)
        }
    };
    let csv = bench_csv(param_name, &rows);
    print!("{csv}");
    let worst = rows.iter().skip(1).map(|r| r.ratio).fold(0.0f64, f64::max);
    println!("bench: {} sweep over {param_name}, worst ratio {:.3}", module.as_str(), worst);
    if let Some(out) = &args.out {
        write_file_atomic(out, &csv)?;
    }
    Ok(())
}

pub fn dump_fields_cmd(args: DumpFieldsArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&args.checkpoint)?;
    let sample = io::read_pointset(&args.data)?;
    if sample.target_dim() != ckpt.config.output_dim || sample.feature_dim() != ckpt.config.feature_dim
    {
        return Err(Error::argument(format!(
            "dump-fields: sample '{}' has (F={}, O={}), checkpoint expects (F={}, O={})",
            sample.name,
            sample.feature_dim(),
            sample.target_dim(),
            ckpt.config.feature_dim,
            ckpt.config.output_dim
        )));
    }
    let model = MnoModel::<f32> { config: ckpt.config.clone(), params: ckpt.params.clone() };
    let normed = normalize_sample(&sample, &ckpt.stats)?;
    let graph = knn_graph(&normed.positions, model.config.k)?;
    let pred = forward_sample(&model, &normed, &graph)?;

    let o = sample.target_dim();
    let mut csv = String::from("x,y,z");
    for c in 0..o {
        csv.push_str(&format!(",truth_{c}"));
    }
    for c in 0..o {
        csv.push_str(&format!(",pred_{c}"));
    }
    for c in 0..o {
        csv.push_str(&format!(",abs_err_{c}"));
    }
    csv.push('\n');
    for i in 0..sample.num_points() {
        let p = sample.positions.row(i);
        csv.push_str(&format!("{},{},{}", p[0], p[1], p[2]));
        for c in 0..o {
            csv.push_str(&format!(",{}", sample.targets.at2(i, c)));
        }
        for c in 0..o {
            csv.push_str(&format!(",{}", pred.at2(i, c)));
        }
        for c in 0..o {
            csv.push_str(&format!(",{}", (pred.at2(i, c) - sample.targets.at2(i, c)).abs()));
        }
        csv.push('\n');
    }
    write_file_atomic(&args.out, &csv)?;
    println!(
        "dump-fields: {} rows ({} channels) written to {}",
        sample.num_points(),
        o,
        args.out.display()
    );
    Ok(())
}

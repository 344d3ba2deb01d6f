use std::fs::File;
use std::path::{Path, PathBuf};

use glassvae_core::diagnostics::{dataset_fixtures, random_fixtures, run_checks};
use glassvae_core::generator::{
    export_latents, generate_conditional, sample_random, to_configuration, write_latents,
};
use glassvae_core::metrics::{evaluate_detailed, parity_export, rdf_compare};
use glassvae_core::periodic_graph::build_graph;
use glassvae_core::synthetic::{self, HarmonicCrystal};
use glassvae_core::trainer::{
    train, CheckpointMeta, FaultInjection, TrainOptions, CHECKPOINT_FILE, LOSS_LOG_FILE,
};
use glassvae_core::trajio::{
    join_energies, parse_dump, read_energy_table, split_dataset, subsample_per_temperature,
    write_jsonl, Split,
};
use glassvae_core::{Checkpoint, Configuration, Data, Graph, SpeciesMap, TargetWindow};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{
    CheckArgs, Command, EvalArgs, GenerateArgs, PrepareArgs, SplitChoice, TrainArgs,
};
use crate::config::{GenMode, RunConfig, RunManifest};
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.jsonl";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| io_err(path, e))
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir().join(name)
}

/// Runs `command` with an already resolved configuration.
pub fn execute(command: &Command, cfg: RunConfig) -> Result<(), CliError> {
    let config_path = command.overrides().and_then(|o| o.config.as_deref());
    match command {
        Command::Prepare(a) => prepare(a, cfg, config_path, command),
        Command::Train(a) => train_cmd(a, cfg, config_path, command),
        Command::Eval(a) => eval(a, cfg, config_path, command),
        Command::Generate(a) => generate(a, cfg, config_path, command),
        Command::CheckInvariance(a) => check(a, cfg, config_path, command),
        Command::Rerun(a) => {
            let m = RunManifest::read(&a.manifest)?;
            let mut cfg = m.config;
            if let Some(o) = &a.out {
                cfg.out = Some(o.clone());
            }
            if matches!(m.command, Command::Rerun(_)) {
                return Err(CliError::Usage(
                    "a manifest cannot replay another rerun".into(),
                ));
            }
            execute(&m.command, cfg)
        }
    }
}

fn parse_dump_arg(arg: &str) -> Result<(f64, PathBuf), CliError> {
    let (t, p) = arg
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--dump expects TEMP:PATH, got {arg:?}")))?;
    let t: f64 = t
        .parse()
        .map_err(|_| CliError::Usage(format!("temperature {t:?} in --dump is not a number")))?;
    Ok((t, PathBuf::from(p)))
}

fn load_frames(a: &PrepareArgs) -> Result<(Vec<Configuration>, Vec<String>), CliError> {
    let map_path = a.species_map.as_ref().ok_or_else(|| {
        CliError::Usage("--species-map is required when reading dump files".into())
    })?;
    let energies = a
        .energies
        .as_ref()
        .ok_or_else(|| CliError::Usage("--energies is required when reading dump files".into()))?;
    if a.dumps.is_empty() {
        return Err(CliError::Usage(
            "give at least one --dump TEMP:PATH or --synthetic N".into(),
        ));
    }
    let dumps = a
        .dumps
        .iter()
        .map(|d| parse_dump_arg(d))
        .collect::<Result<Vec<_>, _>>()?;
    let map = SpeciesMap::read(map_path)?;
    let mut frames = Vec::new();
    for (t, path) in dumps {
        let parsed = parse_dump(std::io::BufReader::new(open(&path)?), &map, t)?;
        log::info!("{}: {} frames at {t} K", path.display(), parsed.len());
        frames.extend(parsed);
    }
    let table = read_energy_table(open(energies)?)?;
    Ok((join_energies(frames, &table)?, map.species()))
}

fn prepare(
    a: &PrepareArgs,
    mut cfg: RunConfig,
    config_path: Option<&Path>,
    command: &Command,
) -> Result<(), CliError> {
    if let Some(r) = a.ratio {
        cfg.prepare.ratio = r;
    }
    if a.max_per_temperature.is_some() {
        cfg.prepare.max_per_temperature = a.max_per_temperature;
    }
    let (mut frames, species) = match a.synthetic {
        Some(n) => (
            HarmonicCrystal::default().generate::<f64>(n, cfg.seed)?,
            synthetic::species(),
        ),
        None => load_frames(a)?,
    };
    if let Some(k) = cfg.prepare.max_per_temperature {
        frames = subsample_per_temperature(frames, k, cfg.seed);
    }
    RunManifest::new(config_path, command, &cfg).write(&cfg.out_dir())?;
    let data = split_dataset(frames, species, cfg.prepare.ratio, cfg.seed)?;
    let path = out_path(&cfg, DATASET_FILE);
    data.write(&path)?;

    println!("{:>12} {:>8} {:>8}", "temperature", "train", "test");
    for (t, tr, te) in data.summary() {
        println!("{t:>12} {tr:>8} {te:>8}");
    }
    println!(
        "split: {} train / {} test",
        data.train().len(),
        data.test().len()
    );
    println!(
        "energy range: {} .. {} eV",
        data.energy_norm.e_min, data.energy_norm.e_max
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn graphs_of(
    configs: &[&Configuration],
    cutoff: f64,
    data: &Data,
    norm: &glassvae_core::Normalizer,
) -> Result<Vec<Graph>, CliError> {
    configs
        .iter()
        .map(|c| build_graph(c, cutoff, Some(norm), &data.species).map_err(CliError::from))
        .collect()
}

fn parse_fault(spec: &str) -> Result<FaultInjection, CliError> {
    let (term, epoch) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--inject-nan expects TERM:EPOCH, got {spec:?}")))?;
    let epoch = epoch.parse().map_err(|_| {
        CliError::Usage(format!("epoch {epoch:?} in --inject-nan is not an integer"))
    })?;
    Ok(FaultInjection {
        term: term.to_string(),
        epoch,
    })
}

fn train_cmd(
    a: &TrainArgs,
    mut cfg: RunConfig,
    config_path: Option<&Path>,
    command: &Command,
) -> Result<(), CliError> {
    let data = Data::read(&a.dataset)?;
    let resume = a
        .resume
        .as_deref()
        .map(Checkpoint::<f64>::load)
        .transpose()?;
    if let Some(ck) = &resume {
        if ck.species != data.species {
            return Err(CliError::Usage(format!(
                "checkpoint species {:?} differ from dataset species {:?}",
                ck.species, data.species
            )));
        }
        cfg.cutoff = ck.cutoff;
        cfg.model = ck.params.config().clone();
    }
    let fault = a.inject_nan.as_deref().map(parse_fault).transpose()?;
    let largest = data.configs.iter().map(|c| c.n_atoms()).max().unwrap_or(0);
    cfg.model.species_count = data.species.len();
    cfg.model.max_nodes = cfg.model.max_nodes.max(largest);
    cfg.model.validate()?;
    cfg.train.validate()?;

    let graphs = graphs_of(&data.train(), cfg.cutoff, &data, &data.energy_norm)?;
    let out = cfg.out_dir();
    RunManifest::new(config_path, command, &cfg).write(&out)?;
    if resume.is_none() {
        let log = out.join(LOSS_LOG_FILE);
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
        }
    }
    let options = TrainOptions {
        out_dir: Some(out.clone()),
        meta: CheckpointMeta {
            species: data.species.clone(),
            cutoff: cfg.cutoff,
            energy_norm: Some(data.energy_norm),
        },
        resume,
        fault,
    };
    let total = cfg.train.epochs;
    let outcome = train(&graphs, &cfg.model, &cfg.train, options, &mut |e| {
        let l = &e.loss;
        println!(
            "epoch {}/{total} total={:.6e} node={:.4e} edge={:.4e} energy={:.4e} kl={:.4e} rdf={:.4e} steps={}",
            e.epoch, l.total, l.node, l.edge, l.energy, l.kl, l.rdf, e.steps
        );
    })?;
    println!(
        "trained {} graphs to epoch {} ({} optimizer steps)",
        graphs.len(),
        outcome.state.epoch,
        outcome.state.adam.step
    );
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn select(data: &Data, split: SplitChoice) -> Vec<&Configuration> {
    match split {
        SplitChoice::Train => data.part(Split::Train),
        SplitChoice::Test => data.part(Split::Test),
        SplitChoice::All => data.configs.iter().collect(),
    }
}

fn eval(
    a: &EvalArgs,
    cfg: RunConfig,
    config_path: Option<&Path>,
    command: &Command,
) -> Result<(), CliError> {
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let data = Data::read(&a.dataset)?;
    let norm = ck.energy_norm.unwrap_or(data.energy_norm);
    let configs = select(&data, a.split);
    let graphs = graphs_of(&configs, ck.cutoff, &data, &norm)?;
    let out = cfg.out_dir();
    RunManifest::new(config_path, command, &cfg).write(&out)?;

    let ev = evaluate_detailed(&graphs, &ck.params, &norm, cfg.eval.batch_size, &ck.rdf)?;
    let report =
        serde_json::to_string_pretty(&ev.report).map_err(|e| CliError::Io(e.to_string()))?;
    let metrics = out.join("metrics.json");
    std::fs::write(&metrics, &report).map_err(|e| io_err(&metrics, e))?;
    parity_export(
        &ev.energy_pred,
        &ev.energy_true,
        &out.join("parity_energy.csv"),
    )?;
    parity_export(
        &ev.dist_pred,
        &ev.dist_true,
        &out.join("parity_distance.csv"),
    )?;
    if let (Some(first), Some(pos)) = (configs.first(), ev.positions_hat.first()) {
        rdf_compare(first, pos, &ck.rdf, cfg.eval.rdf_mode)?
            .write_csv(&out.join("rdf_compare.csv"))?;
    }
    write_latents(
        &export_latents(&ck.params, &graphs, Some(&norm))?,
        &out.join("latents.csv"),
    )?;

    let r = &ev.report;
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    println!("samples        {}", r.n_samples);
    println!(
        "energy RMSE    {:.6} eV/atom (R² {})",
        r.energy_rmse,
        opt(r.energy_r2)
    );
    println!(
        "distance RMSE  {:.6} Å (R² {})",
        r.dist_rmse,
        opt(r.dist_r2)
    );
    println!(
        "node BCE       {:.6} (accuracy {:.4})",
        r.node_bce, r.node_accuracy
    );
    println!("wrote {}", metrics.display());
    Ok(())
}

struct SummaryRow {
    sample: usize,
    anchor: u64,
    energy: f64,
    normalized: f64,
    in_target: Option<bool>,
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record([
        "sample_id",
        "anchor",
        "energy_ev_per_atom",
        "energy_normalized",
        "in_target",
    ])
    .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.sample.to_string(),
            r.anchor.to_string(),
            r.energy.to_string(),
            r.normalized.to_string(),
            r.in_target.map(|b| b.to_string()).unwrap_or_default(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn generate(
    a: &GenerateArgs,
    mut cfg: RunConfig,
    config_path: Option<&Path>,
    command: &Command,
) -> Result<(), CliError> {
    if let Some(n) = a.n_samples {
        cfg.generate.n_samples = n;
    }
    cfg.generate.prior_only |= a.prior;
    cfg.generate.validate()?;
    let ck = Checkpoint::<f64>::load(&a.checkpoint)?;
    let norm = ck
        .energy_norm
        .ok_or_else(|| CliError::Usage("checkpoint carries no energy normalizer".into()))?;
    let data = Data::read(&a.dataset)?;
    let mut anchors = Vec::with_capacity(a.anchors.len());
    for id in &a.anchors {
        let c = data
            .configs
            .iter()
            .find(|c| c.frame_id == *id)
            .ok_or_else(|| {
                CliError::Usage(format!("no frame with id {id} in {}", a.dataset.display()))
            })?;
        anchors.push(build_graph(c, ck.cutoff, Some(&norm), &ck.species)?);
    }
    let window = match (cfg.generate.e_min, cfg.generate.e_max) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => return Err(CliError::Usage("give both --e-min and --e-max".into())),
    };
    if cfg.mode == GenMode::Conditional && window.is_none() {
        return Err(CliError::Usage(
            "conditional mode needs --e-min and --e-max".into(),
        ));
    }
    let out = cfg.out_dir();
    RunManifest::new(config_path, command, &cfg).write(&out)?;

    let mut structures = Vec::new();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.generate.seed);
    for anchor in &anchors {
        let n = anchor.n_nodes();
        let w = window
            .map(|(lo, hi)| TargetWindow::from_ev_per_atom(lo, hi, n, &norm))
            .transpose()?;
        let outputs = match cfg.mode {
            GenMode::Random => sample_random(&ck.params, anchor, &cfg.generate, &mut rng)?
                .into_iter()
                .map(|s| s.output)
                .collect(),
            GenMode::Conditional => {
                let w =
                    w.ok_or_else(|| CliError::Usage("conditional mode needs a window".into()))?;
                let (r, output) = generate_conditional(&ck.params, anchor, &w, &cfg.generate)?;
                traces.push((rows.len(), r.trace));
                vec![output]
            }
        };
        for output in outputs {
            let sample = rows.len();
            structures.push(to_configuration(
                &output,
                anchor,
                &ck.species,
                Some(&norm),
                sample as u64,
            )?);
            rows.push(SummaryRow {
                sample,
                anchor: anchor.frame_id,
                energy: norm.denormalize(output.energy_hat) / n as f64,
                normalized: output.energy_hat,
                in_target: w.map(|w| w.contains(output.energy_hat)),
            });
        }
    }
    write_jsonl(&out.join("structures.jsonl"), &structures)?;
    write_summary(&out.join("summary.csv"), &rows)?;
    if !traces.is_empty() {
        let path = out.join("refine_trace.csv");
        let mut text = String::from("sample_id,step,objective\n");
        for (sample, trace) in &traces {
            for (k, v) in trace.iter().enumerate() {
                text.push_str(&format!("{sample},{k},{v}\n"));
            }
        }
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let hits = rows.iter().filter(|r| r.in_target == Some(true)).count();
    println!("generated {} structures", rows.len());
    if window.is_some() {
        println!("in target: {hits}/{}", rows.len());
    }
    println!("wrote {}", out.join("structures.jsonl").display());
    Ok(())
}

fn check(
    a: &CheckArgs,
    mut cfg: RunConfig,
    config_path: Option<&Path>,
    command: &Command,
) -> Result<(), CliError> {
    if let Some(n) = a.configs {
        cfg.check.n_configs = n;
    }
    if a.no_gradients {
        cfg.check.gradients = false;
    }
    let ck = a
        .checkpoint
        .as_deref()
        .map(Checkpoint::<f64>::load)
        .transpose()?;
    if let Some(ck) = &ck {
        cfg.check.cutoff = ck.cutoff;
    }
    let (fixtures, species) = match &a.dataset {
        Some(p) => {
            let data = Data::read(p)?;
            (
                dataset_fixtures(&data.configs, cfg.check.n_configs, cfg.check.seed),
                data.species,
            )
        }
        None => {
            let species = ck
                .as_ref()
                .map_or_else(synthetic::species, |c| c.species.clone());
            (random_fixtures(&cfg.check, &species)?, species)
        }
    };
    if let Some(ck) = &ck {
        if ck.species != species {
            return Err(CliError::Usage(format!(
                "checkpoint species {:?} differ from fixture species {species:?}",
                ck.species
            )));
        }
    }
    let out = cfg.out.clone();
    if let Some(dir) = &out {
        RunManifest::new(config_path, command, &cfg).write(dir)?;
    }
    let report = run_checks(
        &fixtures,
        ck.as_ref().map(|c| &c.params),
        &species,
        &cfg.check,
    )?;
    println!("{} fixtures, seed {}", fixtures.len(), cfg.check.seed);
    for c in &report.checks {
        println!("{}", c.line());
    }
    if let Some(dir) = &out {
        let path = dir.join("invariance_report.json");
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| match c.fixture_seed {
            Some(s) => format!("{} (fixture seed {s})", c.name),
            None => c.name.clone(),
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(failed.join(", ")))
    }
}

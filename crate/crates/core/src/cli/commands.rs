use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use super::config::{Method, RunConfig};
use super::{Cli, CliError, Command, DenoiserArgs};
use crate::data::{generate_dataset, graph_hash, load_dataset};
use crate::fem::assemble_poisson;
use crate::field::Field;
use crate::guidance::{
    fun_daps_sample, fun_dps_sample, poisson_operator, ForwardOperator, Observation, Potential, SparseSensors,
};
use crate::mesh::{build_hierarchy, dual_graph, save_mesh, shaped_grid, DualGraph, MeshHierarchy, TriMesh};
use crate::metrics::{
    energy_scores, mean_std, mmd_unbiased, posterior_mean_errors, rmse_posterior_mean, write_report, MetricRecord,
    SampleEnsemble,
};
use crate::randfield::{build_covariance, CovarianceFactor};
use crate::rng::stream;
use crate::score::{
    load_checkpoint, save_checkpoint, train_denoiser, Denoiser, GaussianOracleDenoiser, NetGeometry, ScoreNet,
};
use crate::sde::heun_sample;

const CHAIN_STREAM: &str = "chain";
const ORACLE_RIDGE: f64 = 1e-6;

/// Meshes for every hierarchy level, finest first; level `l` uses a `nx/2^l` by `ny/2^l` grid.
pub fn build_mesh(cfg: &RunConfig) -> Result<Vec<TriMesh>, CliError> {
    (0..cfg.mesh.levels)
        .map(|l| {
            let nx = (cfg.mesh.nx >> l).max(1);
            let ny = (cfg.mesh.ny >> l).max(1);
            Ok(shaped_grid(cfg.mesh.shape, nx, ny)?)
        })
        .collect()
}

fn hierarchy(meshes: &[TriMesh], mu: f64) -> Result<MeshHierarchy, CliError> {
    Ok(build_hierarchy(meshes.iter().map(dual_graph).collect(), mu)?)
}

pub fn build_geometry(meshes: &[TriMesh], mu: f64, patch: usize) -> Result<NetGeometry, CliError> {
    Ok(NetGeometry::new(hierarchy(meshes, mu)?, patch)?)
}

fn sample_name(k: usize) -> String {
    format!("{k:05}.fld")
}

/// Fields of a directory: the test split (or, if empty, the training split) of a dataset,
/// otherwise every `*.fld` file in name order.
pub fn read_field_dir(dir: &Path) -> Result<Vec<Field>, CliError> {
    if dir.join("manifest.json").exists() {
        let ds = load_dataset(dir)?;
        return Ok(if ds.test.is_empty() { ds.train } else { ds.test });
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fld"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .fld files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(Field::load(p)?)).collect()
}

fn write_fields(dir: &Path, fields: &[Field]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for (k, f) in fields.iter().enumerate() {
        f.save(dir.join(sample_name(k)))?;
    }
    Ok(())
}

enum Loaded {
    Oracle(GaussianOracleDenoiser),
    Net(Box<ScoreNet>, NetGeometry),
}

impl Loaded {
    fn denoiser(&self) -> Box<dyn Denoiser + '_> {
        match self {
            Loaded::Oracle(o) => Box::new(o),
            Loaded::Net(n, g) => Box::new(n.bind(g)),
        }
    }
}

fn load_denoiser(
    cfg: &RunConfig,
    args: &DenoiserArgs,
    meshes: &[TriMesh],
    factor: &CovarianceFactor,
) -> Result<Loaded, CliError> {
    if let Some(path) = &args.checkpoint {
        let net = load_checkpoint(path)?;
        if net.config().levels != meshes.len() {
            return Err(CliError::Usage(format!(
                "checkpoint has {} levels but mesh.levels is {}",
                net.config().levels,
                meshes.len()
            )));
        }
        let geom = build_geometry(meshes, net.config().mu, net.config().patch)?;
        return Ok(Loaded::Net(Box::new(net), geom));
    }
    if !args.oracle {
        return Err(CliError::Usage("pass --checkpoint PATH or --oracle".into()));
    }
    let n = factor.nodes();
    let (mean, cov) = match &args.data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            check_dataset_graph(&ds.manifest.graph_hash, &dual_graph(&meshes[0]))?;
            let k = ds.train.len() as f64;
            let mut mean = DVector::zeros(n);
            for f in &ds.train {
                mean += DVector::from_column_slice(f.values());
            }
            mean /= k;
            let mut cov = DMatrix::identity(n, n) * ORACLE_RIDGE;
            for f in &ds.train {
                let d = DVector::from_column_slice(f.values()) - &mean;
                cov += &d * d.transpose() / k;
            }
            (Field::scalar(mean.as_slice().to_vec()), cov)
        }
        None => (Field::zeros(n, 1), factor.kernel().clone()),
    };
    let _ = cfg;
    Ok(Loaded::Oracle(GaussianOracleDenoiser::new(&mean, cov, factor)?))
}

fn check_dataset_graph(hash: &str, graph: &DualGraph) -> Result<(), CliError> {
    if hash != graph_hash(graph) {
        return Err(CliError::Usage(
            "dataset was generated on a different mesh than the configured one".into(),
        ));
    }
    Ok(())
}

fn covariance(cfg: &RunConfig, graph: &DualGraph) -> Result<CovarianceFactor, CliError> {
    Ok(build_covariance(
        &graph.positions,
        cfg.covariance.length_scale,
        cfg.covariance.jitter,
    )?)
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let g = &cli.global;
    let mut cfg = RunConfig::default();
    let mut errors = Vec::new();
    if let Some(path) = &g.config {
        match std::fs::read_to_string(path) {
            Ok(text) => cfg.apply_text(&text, &mut errors),
            Err(e) => errors.push(format!("--config {}: {e}", path.display())),
        }
    }
    for o in &g.overrides {
        cfg.apply_override(o, &mut errors);
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    errors.extend(cfg.validate());
    let mut inputs: Vec<(&str, &PathBuf)> = Vec::new();
    match &cli.command {
        Command::Train { data } => inputs.push(("--data", data)),
        Command::Sample { denoiser, .. } | Command::Posterior { denoiser, .. } => {
            if let Some(p) = &denoiser.checkpoint {
                inputs.push(("--checkpoint", p));
            }
            if let Some(p) = &denoiser.data {
                inputs.push(("--data", p));
            }
        }
        _ => {}
    }
    match &cli.command {
        Command::Posterior {
            observation, truth, ..
        } => {
            inputs.extend(observation.iter().map(|p| ("--observation", p)));
            inputs.extend(truth.iter().map(|p| ("--truth", p)));
        }
        Command::Eval {
            ensemble,
            truth,
            samples,
            reference,
            ..
        } => {
            inputs.extend(ensemble.iter().map(|p| ("--ensemble", p)));
            inputs.extend(truth.iter().map(|p| ("--truth", p)));
            inputs.extend(samples.iter().map(|p| ("--samples", p)));
            inputs.extend(reference.iter().map(|p| ("--reference", p)));
        }
        _ => {}
    }
    for (flag, p) in inputs {
        if !p.exists() {
            errors.push(format!("{flag} {}: no such file or directory", p.display()));
        }
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(errors))
    }
}

/// Runs one command and returns a one-line JSON summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    std::fs::create_dir_all(&cfg.out)?;
    let outputs = pool.install(|| dispatch(cli, &cfg))?;
    let record = json!({
        "command": cli.command.name(),
        "args": cli.command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "threads": cli.global.threads,
        "config_hash": cfg.hash(),
        "config": cfg.to_text(),
        "outputs": outputs,
    });
    std::fs::write(cfg.out.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(json!({
        "command": cli.command.name(),
        "out": cfg.out,
        "outputs": outputs,
    })
    .to_string())
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let out = &cfg.out;
    let meshes = build_mesh(cfg)?;
    let fine = dual_graph(&meshes[0]);
    match &cli.command {
        Command::Mesh => {
            save_mesh(&meshes[0], out.join("mesh.txt"))?;
            let h = hierarchy(&meshes, cfg.model.mu)?;
            std::fs::write(out.join("hierarchy.json"), serde_json::to_string(&h)? + "\n")?;
            Ok(vec!["mesh.txt".into(), "hierarchy.json".into()])
        }
        Command::GenData => {
            let m = generate_dataset(
                &fine,
                &cfg.blob_params(),
                cfg.mesh.shape,
                cfg.data.count,
                cfg.data.train_fraction,
                cfg.seed,
                out,
            )?;
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            Ok(vec!["manifest.json".into(), "train/".into(), "test/".into()])
        }
        Command::Train { data } => {
            let ds = load_dataset(data)?;
            check_dataset_graph(&ds.manifest.graph_hash, &fine)?;
            let net_cfg = cfg.net_config();
            let geom = build_geometry(&meshes, net_cfg.mu, net_cfg.patch)?;
            let factor = covariance(cfg, &fine)?;
            let mut net = ScoreNet::new(net_cfg, &mut stream(cfg.seed, "init", 0))?;
            let report = train_denoiser(
                &mut net,
                &geom,
                &ds.train,
                &factor,
                &cfg.train_config(cli.global.threads != 1),
            )?;
            save_checkpoint(&net, out.join("model.ckpt"))?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("loss.csv"))?);
            writeln!(w, "iteration,loss")?;
            for (i, l) in report.losses.iter().enumerate() {
                writeln!(w, "{i},{l:e}")?;
            }
            w.flush()?;
            Ok(vec!["model.ckpt".into(), "loss.csv".into()])
        }
        Command::Sample { denoiser, count } => {
            let factor = covariance(cfg, &fine)?;
            let loaded = load_denoiser(cfg, denoiser, &meshes, &factor)?;
            let den = loaded.denoiser();
            let sched = cfg.noise_schedule();
            let count = count.unwrap_or(cfg.sample.count);
            let fields: Vec<Field> = (0..count)
                .into_par_iter()
                .map(|k| heun_sample(&*den, &sched, &factor, &mut stream(cfg.seed, CHAIN_STREAM, k as u64), None))
                .collect::<Result<_, _>>()?;
            write_fields(&out.join("samples"), &fields)?;
            Ok(vec!["samples/".into()])
        }
        Command::Posterior {
            denoiser,
            observation,
            truth,
            sensors,
            method,
            chains,
        } => {
            let factor = covariance(cfg, &fine)?;
            let loaded = load_denoiser(cfg, denoiser, &meshes, &factor)?;
            let den = loaded.denoiser();
            let mut outputs = vec!["ensemble/".to_string()];
            let obs = match (observation, truth) {
                (Some(p), _) => Observation::load(p)?,
                (None, Some(t)) => {
                    let truth = Field::load(t)?;
                    let m = sensors.expect("clap requires --sensors with --truth");
                    if truth.nodes() != fine.node_count() || truth.channels() != 1 {
                        return Err(CliError::Usage(format!(
                            "truth has {}x{} values, mesh has {} nodes",
                            truth.nodes(),
                            truth.channels(),
                            fine.node_count()
                        )));
                    }
                    if m > truth.nodes() {
                        return Err(CliError::Usage(format!("{m} sensors exceed {} nodes", truth.nodes())));
                    }
                    let mut idx =
                        rand::seq::index::sample(&mut stream(cfg.seed, "sensors", 0), truth.nodes(), m).into_vec();
                    idx.sort_unstable();
                    let obs = Observation::Sensors(idx.iter().map(|&i| (i, truth.values()[i])).collect());
                    obs.save(out.join("observation.txt"))?;
                    outputs.push("observation.txt".into());
                    obs
                }
                (None, None) => unreachable!("clap requires --observation or --truth"),
            };
            let method = method.unwrap_or(cfg.guidance.method);
            let chains = chains.unwrap_or(cfg.guidance.chains);
            let fields = match obs {
                Observation::Sensors(pairs) => {
                    let (idx, y): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
                    let op = SparseSensors::new(fine.node_count(), idx, cfg.guidance.noise_std)?;
                    run_chains(cfg, &*den, &factor, &Potential::new(op, y), method, chains)?
                }
                Observation::Poisson(path) => {
                    let op = poisson_operator(assemble_poisson(&meshes[0])?, cfg.guidance.noise_std);
                    let u = Field::load(&path)?;
                    if u.nodes() != op.system().n_vertices() || u.channels() != 1 {
                        return Err(CliError::Usage(format!(
                            "Poisson observation has {} values, mesh has {} vertices",
                            u.nodes(),
                            op.system().n_vertices()
                        )));
                    }
                    run_chains(cfg, &*den, &factor, &Potential::new(op, u.into_values()), method, chains)?
                }
            };
            write_fields(&out.join("ensemble"), &fields)?;
            Ok(outputs)
        }
        Command::Eval {
            ensemble,
            truth,
            samples,
            reference,
            noise_baseline,
        } => eval(cfg, &fine, ensemble, truth, samples.as_deref(), reference.as_deref(), *noise_baseline),
    }
}

fn run_chains<O: ForwardOperator>(
    cfg: &RunConfig,
    den: &dyn Denoiser,
    factor: &CovarianceFactor,
    pot: &Potential<O>,
    method: Method,
    chains: usize,
) -> Result<Vec<Field>, CliError> {
    let sched = cfg.noise_schedule();
    let gcfg = cfg.guidance_config();
    (0..chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(cfg.seed, CHAIN_STREAM, k as u64);
            Ok(match method {
                Method::Dps => fun_dps_sample(den, &sched, factor, pot, &gcfg, &mut rng)?,
                Method::Daps => fun_daps_sample(den, &sched, factor, pot, &gcfg, &mut rng)?,
            })
        })
        .collect()
}

fn eval(
    cfg: &RunConfig,
    fine: &DualGraph,
    ensembles: &[PathBuf],
    truths: &[PathBuf],
    samples: Option<&Path>,
    reference: Option<&Path>,
    noise_baseline: bool,
) -> Result<Vec<String>, CliError> {
    if ensembles.len() != truths.len() {
        return Err(CliError::Usage(format!(
            "{} ensembles but {} truths; pass them in pairs",
            ensembles.len(),
            truths.len()
        )));
    }
    if ensembles.is_empty() && samples.is_none() {
        return Err(CliError::Usage("nothing to evaluate: pass --ensemble/--truth or --samples/--reference".into()));
    }
    let out = &cfg.out;
    let mut records = Vec::new();
    let mut outputs = vec!["report.jsonl".to_string(), "metrics.csv".to_string()];
    if !ensembles.is_empty() {
        let sets = ensembles.iter().map(|d| read_field_dir(d)).collect::<Result<Vec<_>, _>>()?;
        let truths = truths.iter().map(|p| Ok(Field::load(p)?)).collect::<Result<Vec<_>, CliError>>()?;
        let ens = SampleEnsemble::new(sets, truths)?;
        let (n, k) = (ens.observations(), ens.samples_per_observation());
        let errors = posterior_mean_errors(&ens);
        let es = energy_scores(&ens);
        let record = |metric: &str, mean: f64, std: f64| MetricRecord {
            metric: metric.into(),
            config: "posterior".into(),
            mean,
            std,
            n,
            k,
            seed: cfg.seed,
        };
        records.push(record("rmse", rmse_posterior_mean(&ens), mean_std(&errors).1));
        let (m, s) = mean_std(&es);
        records.push(record("energy_score", m, s));
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("posterior.csv"))?);
        writeln!(w, "observation,mean_error,energy_score")?;
        for (i, (e, s)) in errors.iter().zip(&es).enumerate() {
            writeln!(w, "{i},{e:e},{s:e}")?;
        }
        w.flush()?;
        outputs.push("posterior.csv".into());
    }
    if let Some(dir) = samples {
        let xs = read_field_dir(dir)?;
        let refs = read_field_dir(reference.expect("clap requires --reference with --samples"))?;
        let ell = cfg.eval.mmd_length_scale;
        let mut push = |config: &str, set: &[Field]| -> Result<(), CliError> {
            let m = mmd_unbiased(set, &refs, ell)?;
            records.push(MetricRecord {
                metric: "mmd2_u".into(),
                config: config.into(),
                mean: m.mmd2,
                std: 0.0,
                n: refs.len(),
                k: set.len(),
                seed: cfg.seed,
            });
            Ok(())
        };
        push("samples", &xs)?;
        if noise_baseline {
            let factor = covariance(cfg, fine)?;
            let mut rng = stream(cfg.seed, "noise", 0);
            let noise: Vec<Field> = (0..xs.len()).map(|_| factor.sample(&mut rng, 1)).collect();
            push("noise", &noise)?;
        }
    }
    write_report(&records, std::io::BufWriter::new(std::fs::File::create(out.join("report.jsonl"))?))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.csv"))?);
    writeln!(w, "metric,config,mean,std,n,K,seed")?;
    for r in &records {
        writeln!(w, "{},{},{:e},{:e},{},{},{}", r.metric, r.config, r.mean, r.std, r.n, r.k, r.seed)?;
    }
    w.flush()?;
    Ok(outputs)
}

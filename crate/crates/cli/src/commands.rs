//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use sulcal_ssl::contrastive::{
    collapse_metric, embed as embed_corpus, train_with_progress, write_loss_csv, EmbeddingSet,
};
use sulcal_ssl::nn::checkpoint;
use sulcal_ssl::parallel::configured_threads;
use sulcal_ssl::probe::{
    evaluate_report, pca_baseline, probe_auc, stratified_split, AucReport, Split,
};
use sulcal_ssl::skeleton::{Corpus, ManifestRow};
use sulcal_ssl::synth::generate_corpus;

use crate::config::RunConfig;
use crate::CliError;

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.sslf";
pub const LOSS_FILE: &str = "loss.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out()?;
    cfg.synth
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    let rows = generate_corpus(&cfg.synth, out)?;
    let positives = rows.iter().filter(|r| r.label == Some(1)).count();
    println!(
        "wrote {} crops ({positives} double-parallel) to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

/// Trains one model and fills `dir` with its run file, checkpoint, loss curve
/// and embeddings, which are returned.
pub fn train_run(
    cfg: &RunConfig,
    corpus: &Corpus,
    dir: &Path,
    threads: usize,
) -> Result<EmbeddingSet, CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_FILE), cfg.to_json())?;
    let run = dir.display().to_string();
    let outcome = train_with_progress(&corpus.crops, &cfg.train, threads, |epoch, loss| {
        log::info!("{run}: epoch {epoch}/{} loss {loss:.6}", cfg.train.epochs);
    })?;
    checkpoint::save(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
    write_loss_csv(&outcome.losses, &dir.join(LOSS_FILE))?;
    let e = embed_corpus(
        &outcome.params,
        &corpus.crops,
        cfg.probe.representation,
        &dir.join(CHECKPOINT_FILE).display().to_string(),
        threads,
    )?;
    e.write_csv(&dir.join(EMBEDDINGS_FILE))?;
    let spread = collapse_metric(&e)?;
    if spread < 1e-3 {
        log::warn!("{run}: embeddings have collapsed (mean per-dimension sd {spread:e})");
    }
    Ok(e)
}

fn split_for(cfg: &RunConfig, manifest: &[ManifestRow]) -> Result<Split, CliError> {
    Ok(stratified_split(
        manifest,
        cfg.probe.split_frac,
        cfg.probe.split_seed,
    )?)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = cfg.out()?.join(cfg.run_id());
    let corpus = Corpus::load(cfg.corpus()?)?;
    let e = train_run(cfg, &corpus, &dir, configured_threads())?;
    println!(
        "trained {} (collapse metric {:.6})",
        dir.display(),
        collapse_metric(&e)?
    );
    if corpus.manifest.iter().all(|r| r.label.is_some()) {
        let split = split_for(cfg, &corpus.manifest)?;
        match probe_auc(&e, &corpus.manifest, &split, cfg.probe.c) {
            Ok(auc) => {
                let report = AucReport::from_aucs(vec![auc])?;
                fs::write(dir.join(REPORT_FILE), report.to_json()? + "\n")?;
                println!("probe AUC {auc:.4}");
            }
            Err(e) => log::warn!("skipping probe: {e}"),
        }
    }
    Ok(())
}

pub fn embed(cfg: &RunConfig, checkpoint_path: &Path, out: &Path) -> Result<(), CliError> {
    let params = checkpoint::load(checkpoint_path)?;
    let corpus = Corpus::load(cfg.corpus()?)?;
    let e = embed_corpus(
        &params,
        &corpus.crops,
        cfg.probe.representation,
        &checkpoint_path.display().to_string(),
        configured_threads(),
    )?;
    e.write_csv(out)?;
    println!(
        "wrote {} embeddings of dimension {} to {}",
        e.len(),
        e.dim(),
        out.display()
    );
    Ok(())
}

fn read_split(path: &Path, manifest: &[ManifestRow]) -> Result<Split, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("subject_id,part") {
        return Err(CliError::Usage(format!(
            "{} is not a split CSV (subject_id,part)",
            path.display()
        )));
    }
    let mut split = stratified_split(manifest, 0.5, 0)?;
    split.part1.clear();
    split.part2.clear();
    for line in lines.filter(|l| !l.is_empty()) {
        match line.split_once(',') {
            Some((id, "1")) => split.part1.push(id.to_string()),
            Some((id, "2")) => split.part2.push(id.to_string()),
            _ => {
                return Err(CliError::Usage(format!(
                    "bad split row {line:?} in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(split)
}

pub fn probe(
    cfg: &RunConfig,
    embeddings: &Path,
    split_path: Option<&Path>,
    split_out: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let e = EmbeddingSet::read_csv(embeddings)?;
    let corpus = cfg.corpus()?;
    let manifest =
        sulcal_ssl::skeleton::read_manifest(&corpus.join(sulcal_ssl::skeleton::MANIFEST_FILE))?;
    let split = match split_path {
        Some(p) => read_split(p, &manifest)?,
        None => split_for(cfg, &manifest)?,
    };
    if let Some(p) = split_out {
        split.write_csv(&manifest, p)?;
    }
    let report = evaluate_report(&[e], &manifest, &split, cfg.probe.c)?;
    let json = report.to_json()? + "\n";
    if let Some(p) = out {
        fs::write(p, &json)?;
    }
    print!("{json}");
    Ok(())
}

/// Training seed recorded next to a checkpoint, if its run file is there.
fn run_seed(checkpoint_path: &Path) -> Option<u64> {
    let run = checkpoint_path.parent()?.join(RUN_FILE);
    let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(run).ok()?).ok()?;
    Some(cfg.train.seed)
}

pub fn report(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    out: Option<&Path>,
    csv: Option<&Path>,
    pca_dim: Option<usize>,
) -> Result<(), CliError> {
    let corpus = Corpus::load(cfg.corpus()?)?;
    let split = split_for(cfg, &corpus.manifest)?;
    let threads = configured_threads();
    let mut sets = Vec::new();
    for path in checkpoints {
        let params = checkpoint::load(path)?;
        sets.push(embed_corpus(
            &params,
            &corpus.crops,
            cfg.probe.representation,
            &path.display().to_string(),
            threads,
        )?);
    }
    let report = evaluate_report(&sets, &corpus.manifest, &split, cfg.probe.c)?;
    if let Some(p) = out {
        fs::write(p, report.to_json()? + "\n")?;
    }
    if let Some(p) = csv {
        let seeds: Vec<u64> = checkpoints
            .iter()
            .enumerate()
            .map(|(i, c)| run_seed(c).unwrap_or(i as u64))
            .collect();
        fs::write(p, report.to_csv(&seeds)?)?;
    }
    for (path, auc) in checkpoints.iter().zip(&report.aucs) {
        println!("{}: AUC {auc:.4}", path.display());
    }
    println!(
        "AUC {:.4} ± {:.4} (n={} models)",
        report.mean, report.sd, report.n
    );
    if let Some(dim) = pca_dim {
        let pca = pca_baseline(&corpus.crops, dim)?;
        let auc = probe_auc(&pca, &corpus.manifest, &split, cfg.probe.c)?;
        println!("PCA-{dim} baseline AUC {auc:.4}");
    }
    Ok(())
}

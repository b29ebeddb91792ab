//! Resumable hyperparameter sweeps.
//!
//! Every (cell, repeat) pair trains in its own directory under
//! `<out>/<run-id>/cells/`. A pair whose directory already holds a report for
//! the same configuration is skipped, so an interrupted sweep resumes where it
//! stopped. Workers append to `results.csv` under an exclusive file lock; once
//! all pairs are done the table is rewritten in cell order so its bytes do not
//! depend on scheduling.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sulcal_ssl::augment::AugmentSpec;
use sulcal_ssl::contrastive::format_f64;
use sulcal_ssl::parallel::{configured_threads, pool};
use sulcal_ssl::probe::{probe_auc, stratified_split, AucReport};
use sulcal_ssl::skeleton::Corpus;

use crate::commands::{train_run, REPORT_FILE, RUN_FILE};
use crate::config::RunConfig;
use crate::CliError;

pub const RESULTS_FILE: &str = "results.csv";
const LOCK_FILE: &str = "results.lock";
const HEADER: &str = "cell_id,repeat,seed,lr,batch_size,augment,cutout_frac,clip_frac,dropout_p,latent_dim,head,auc\n";

#[derive(Debug, Clone)]
pub struct Cell {
    pub id: String,
    pub repeat: usize,
    pub cfg: RunConfig,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Expands the grid in a fixed axis order; repeats are innermost.
pub fn cells(cfg: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let g = &cfg.grid;
    if g.is_empty() {
        return Err(CliError::Usage(
            "empty grid: give at least one --grid-* axis".into(),
        ));
    }
    if g.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let t = &cfg.train;
    let mut out = Vec::new();
    let mut index = 0;
    for lr in axis(&g.lr, t.lr) {
        for batch in axis(&g.batch_size, t.batch_size) {
            for strategy in axis(&g.augment, t.augment.strategy) {
                for cutout in axis(&g.cutout_frac, t.augment.cutout_frac) {
                    for clip in axis(&g.clip_frac, t.augment.clip_frac) {
                        for dropout in axis(&g.dropout_p, t.dropout_p) {
                            for latent in axis(&g.latent_dim, t.latent_dim) {
                                for head in axis(&g.head, t.head) {
                                    for repeat in 0..g.repeats {
                                        let mut c = cfg.clone();
                                        c.grid = Default::default();
                                        let tc = &mut c.train;
                                        tc.lr = lr;
                                        tc.batch_size = batch;
                                        if strategy != t.augment.strategy {
                                            tc.augment = AugmentSpec {
                                                strategy,
                                                keep_bottom: AugmentSpec::for_strategy(strategy)
                                                    .keep_bottom,
                                                ..t.augment.clone()
                                            };
                                        }
                                        tc.augment.cutout_frac = cutout;
                                        tc.augment.clip_frac = clip;
                                        tc.dropout_p = dropout;
                                        tc.latent_dim = latent;
                                        tc.head = head;
                                        tc.seed = t.seed + repeat as u64;
                                        let id = format!("c{index:03}-r{repeat}");
                                        c.paths.run_id = Some(id.clone());
                                        tc.validate().map_err(|e| {
                                            CliError::Usage(format!("cell {id}: {e}"))
                                        })?;
                                        out.push(Cell { id, repeat, cfg: c });
                                    }
                                    index += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn row(cell: &Cell, auc: f64) -> String {
    let t = &cell.cfg.train;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}\n",
        cell.id,
        cell.repeat,
        t.seed,
        t.lr,
        t.batch_size,
        t.augment.strategy,
        t.augment.cutout_frac,
        t.augment.clip_frac,
        t.dropout_p,
        t.latent_dim,
        t.head,
        format_f64(auc)
    )
}

/// AUC of a finished cell, or `None` when it has to (re)train.
fn finished(dir: &Path, cell: &Cell) -> Option<f64> {
    let run: RunConfig =
        serde_json::from_str(&fs::read_to_string(dir.join(RUN_FILE)).ok()?).ok()?;
    if run != cell.cfg {
        return None;
    }
    let report: AucReport =
        serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE)).ok()?).ok()?;
    report.aucs.first().copied()
}

fn with_lock<T>(root: &Path, f: impl FnOnce() -> std::io::Result<T>) -> std::io::Result<T> {
    let lock = File::create(root.join(LOCK_FILE))?;
    lock.lock()?;
    let out = f();
    lock.unlock()?;
    out
}

fn append(root: &Path, line: &str) -> std::io::Result<()> {
    with_lock(root, || {
        let path = root.join(RESULTS_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            f.write_all(HEADER.as_bytes())?;
        }
        f.write_all(line.as_bytes())
    })
}

pub fn gridsearch(cfg: &RunConfig) -> Result<(), CliError> {
    let all = cells(cfg)?;
    let root: PathBuf = cfg
        .out()?
        .join(cfg.paths.run_id.clone().unwrap_or_else(|| "grid".into()));
    let corpus = Corpus::load(cfg.corpus()?)?;
    fs::create_dir_all(root.join("cells"))?;
    fs::write(root.join(RUN_FILE), cfg.to_json())?;
    let split = stratified_split(&corpus.manifest, cfg.probe.split_frac, cfg.probe.split_seed)?;
    split.write_csv(&corpus.manifest, &root.join("split.csv"))?;

    let pending: Vec<&Cell> = all
        .iter()
        .filter(|c| finished(&root.join("cells").join(&c.id), c).is_none())
        .collect();
    log::info!(
        "{} of {} models to train ({} already done)",
        pending.len(),
        all.len(),
        all.len() - pending.len()
    );
    let workers = pool(configured_threads())?;
    let failures: Vec<String> = workers.install(|| {
        pending
            .par_iter()
            .filter_map(|cell| {
                let dir = root.join("cells").join(&cell.id);
                let result = (|| -> Result<f64, CliError> {
                    // Cells already run in parallel, so each trains on one thread.
                    let e = train_run(&cell.cfg, &corpus, &dir, 1)?;
                    let auc = probe_auc(&e, &corpus.manifest, &split, cell.cfg.probe.c)?;
                    fs::write(
                        dir.join(REPORT_FILE),
                        AucReport::from_aucs(vec![auc])?.to_json()? + "\n",
                    )?;
                    append(&root, &row(cell, auc))?;
                    Ok(auc)
                })();
                match result {
                    Ok(auc) => {
                        log::info!("{}: AUC {auc:.4}", cell.id);
                        None
                    }
                    Err(e) => Some(format!("{}: {e}", cell.id)),
                }
            })
            .collect()
    });

    let mut table = String::from(HEADER);
    for cell in &all {
        if let Some(auc) = finished(&root.join("cells").join(&cell.id), cell) {
            table.push_str(&row(cell, auc));
        }
    }
    with_lock(&root, || fs::write(root.join(RESULTS_FILE), &table))?;
    println!("{}", root.join(RESULTS_FILE).display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(sulcal_ssl::Error::Validation(format!(
            "{} cells failed: {}",
            failures.len(),
            failures.join("; ")
        ))))
    }
}

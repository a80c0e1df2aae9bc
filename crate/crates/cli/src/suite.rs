//! Batch runner for a manifest of experiments.
//!
//! A manifest is a JSON list (or `{"experiments": [...]}`) of
//! `{"name": ..., "args": [subcommand, flags...]}`. Experiments run
//! concurrently; each one's outcome goes into the index file, and a failing
//! experiment does not stop the others.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Parser;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scripsim::report::{to_json, write_atomic};

use crate::args::{Cli, Command};
use crate::{classify, commands};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Experiment {
    name: String,
    args: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Manifest {
    List(Vec<Experiment>),
    Wrapped { experiments: Vec<Experiment> },
}

#[derive(Debug, Serialize)]
struct IndexEntry {
    name: String,
    status: &'static str,
    exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    summary: String,
}

#[derive(Debug, Serialize)]
struct Index {
    manifest: PathBuf,
    succeeded: usize,
    failed: usize,
    experiments: Vec<IndexEntry>,
}

fn run_one(exp: &Experiment) -> IndexEntry {
    let argv = std::iter::once("scripsim".to_string()).chain(exp.args.iter().cloned());
    let outcome = match Cli::try_parse_from(argv) {
        Ok(cli) if matches!(cli.command, Command::Suite { .. }) => {
            Err(anyhow::anyhow!("suites cannot be nested"))
        }
        Ok(cli) => commands::run(&cli.command),
        Err(e) => Err(anyhow::anyhow!(e.to_string().trim().to_string())),
    };
    match outcome {
        Ok(summary) => IndexEntry {
            name: exp.name.clone(),
            status: "ok",
            exit_code: 0,
            error: None,
            message: None,
            summary,
        },
        Err(err) => {
            let (code, name) = classify(&err);
            IndexEntry {
                name: exp.name.clone(),
                status: "failed",
                exit_code: code,
                error: Some(name.to_string()),
                message: Some(format!("{err:#}")),
                summary: String::new(),
            }
        }
    }
}

pub fn run_suite(manifest: &Path, out: Option<&Path>) -> Result<String> {
    let text = fs::read_to_string(manifest)?;
    let experiments = match serde_json::from_str::<Manifest>(&text) {
        Ok(Manifest::List(list)) | Ok(Manifest::Wrapped { experiments: list }) => list,
        Err(e) => bail!(scripsim::Error::Config(format!(
            "manifest {}: {e}",
            manifest.display()
        ))),
    };
    let entries: Vec<IndexEntry> = experiments.par_iter().map(run_one).collect();
    let failed = entries.iter().filter(|e| e.status != "ok").count();
    let index = Index {
        manifest: manifest.to_path_buf(),
        succeeded: entries.len() - failed,
        failed,
        experiments: entries,
    };
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => manifest
            .parent()
            .unwrap_or(Path::new("."))
            .join("suite-index.json"),
    };
    write_atomic(&path, to_json(&index)?.as_bytes())?;
    let mut summary = String::new();
    for e in &index.experiments {
        summary += &format!(
            "{} {}{}\n",
            e.status,
            e.name,
            e.error
                .as_ref()
                .map_or(String::new(), |n| format!(" ({n})"))
        );
    }
    summary += &format!(
        "{} succeeded, {} failed; index at {}\n",
        index.succeeded,
        index.failed,
        path.display()
    );
    Ok(summary)
}

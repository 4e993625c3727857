//! Experiment runner: config ingestion, named studies, deterministic output
//! files, and bit-exact replay.
//!
//! A run writes three kinds of artifacts into the configured output
//! directory: a `manifest.json` echoing the resolved config, tool version,
//! and master seed; the study tables as CSV; and a machine-readable
//! `summary.json` with one pass/fail record per check. Every byte of every
//! output is a pure function of the manifest, so `replay` can re-execute a
//! manifest and compare outputs byte for byte. The worker count (environment
//! variable `MFCLAB_THREADS`) affects speed, never results.

pub mod config;
pub mod expr;
pub mod studies;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use config::ExperimentConfig;
use studies::{run_study, CheckRecord, StudyOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

/// Environment variable naming the rayon worker count for a run.
pub const THREADS_ENV: &str = "MFCLAB_THREADS";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    master_seed: u64,
    config: ExperimentConfig,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    study: String,
    pass: bool,
    checks: Vec<CheckRecord>,
}

/// Fully rendered artifacts of one run.
pub struct RunArtifacts {
    pub manifest: String,
    /// `(filename, bytes)` in a fixed order; `summary.json` is last.
    pub files: Vec<(String, String)>,
    pub pass: bool,
}

fn render_summary(config: &ExperimentConfig, output: &StudyOutput) -> String {
    let summary = Summary {
        study: config.study.name().to_string(),
        pass: output.pass(),
        checks: output.checks.clone(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    text
}

/// Executes a parsed config entirely in memory.
pub fn execute(config: &ExperimentConfig) -> Result<RunArtifacts, studies::StudyError> {
    let output = run_study(config)?;
    let mut files: Vec<(String, String)> = output.tables.clone();
    files.push(("summary.json".into(), render_summary(config, &output)));
    let manifest = Manifest {
        tool: "mfclab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        master_seed: config.seed,
        config: config.clone(),
        outputs: files.iter().map(|(name, _)| name.clone()).collect(),
    };
    let mut manifest_text =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_text.push('\n');
    Ok(RunArtifacts {
        manifest: manifest_text,
        files,
        pass: output.pass(),
    })
}

fn install_pool_and_run<T>(f: impl FnOnce() -> T + Send, out: &mut Option<T>)
where
    T: Send,
{
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if threads == 0 {
        *out = Some(f());
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool");
        *out = Some(pool.install(f));
    }
}

/// Runs a config file, writes artifacts into its output directory, and
/// returns the process exit code: 0 when all checks pass, 2 when a check
/// fails, 1 on any error.
pub fn run(config_path: &Path) -> i32 {
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", config_path.display());
            return EXIT_ERROR;
        }
    };
    let config = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let mut result: Option<Result<RunArtifacts, studies::StudyError>> = None;
    install_pool_and_run(|| execute(&config), &mut result);
    let artifacts = match result.expect("runner executed") {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };

    let out_dir = Path::new(&config.output_dir);
    if let Err(e) = fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return EXIT_ERROR;
    }
    if let Err(e) = fs::write(out_dir.join("manifest.json"), &artifacts.manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return EXIT_ERROR;
    }
    for (name, content) in &artifacts.files {
        if let Err(e) = fs::write(out_dir.join(name), content) {
            eprintln!("error: cannot write {name}: {e}");
            return EXIT_ERROR;
        }
    }
    for (name, _) in &artifacts.files {
        println!("wrote {}", out_dir.join(name).display());
    }
    if artifacts.pass {
        println!("summary: pass");
        EXIT_OK
    } else {
        println!("summary: CHECK FAILED");
        EXIT_CHECK_FAILED
    }
}

/// Re-executes the run recorded in a manifest and compares every output file
/// byte for byte against what is on disk next to the manifest. Returns 0 iff
/// identical, 2 on a mismatch (reporting the first differing line), 1 on
/// error.
pub fn replay(manifest_path: &Path) -> i32 {
    let text = match fs::read_to_string(manifest_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read manifest {}: {e}", manifest_path.display());
            return EXIT_ERROR;
        }
    };
    let manifest: Manifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: manifest is not valid: {e}");
            return EXIT_ERROR;
        }
    };
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut result: Option<Result<RunArtifacts, studies::StudyError>> = None;
    install_pool_and_run(|| execute(&manifest.config), &mut result);
    let artifacts = match result.expect("runner executed") {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };

    let mut mismatches = 0usize;
    for (name, fresh) in &artifacts.files {
        let recorded = match fs::read_to_string(base.join(name)) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read recorded output {name}: {e}");
                return EXIT_ERROR;
            }
        };
        if &recorded != fresh {
            mismatches += 1;
            let line = first_differing_line(&recorded, fresh);
            eprintln!(
                "mismatch in {name} at line {}: recorded `{}` vs replayed `{}`",
                line.0, line.1, line.2
            );
        } else {
            println!("{name}: identical");
        }
    }
    if mismatches == 0 {
        println!("replay: identical");
        EXIT_OK
    } else {
        eprintln!("replay: {mismatches} file(s) differ");
        EXIT_CHECK_FAILED
    }
}

fn first_differing_line(a: &str, b: &str) -> (usize, String, String) {
    for (i, (la, lb)) in a.lines().zip(b.lines()).enumerate() {
        if la != lb {
            return (i + 1, la.to_string(), lb.to_string());
        }
    }
    let (na, nb) = (a.lines().count(), b.lines().count());
    (
        na.min(nb) + 1,
        a.lines().nth(nb).unwrap_or("<eof>").to_string(),
        b.lines().nth(na).unwrap_or("<eof>").to_string(),
    )
}

//! End-to-end runs: assemble, train, evaluate, report and write artifacts.
//!
//! A run directory holds `config.toml`, `policy.ckpt`, `convergence.csv`,
//! `trajectories.csv`, `metrics.csv`, the benchmark files when the problem is
//! linear-Gaussian, `figures/*.svg`, `timing.json` and `manifest.json`. The
//! manifest hashes every artifact except `timing.json`, which is the only
//! file carrying wall-clock data when the config asks for reproducible output.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DistributionConfig, ExperimentConfig};
use crate::covsteer::{optimize_affine, Benchmark, OptimizeOptions};
use crate::error::{Error, Result};
use crate::figures::{self, Bounds, ContourLayer};
use crate::flow::trajectory_header;
use crate::metrics::{report, MetricsReport, ReportSettings};
use crate::sdpa::{export_sdp, ExportOptions, SdpProblem};
use crate::trainer::{train, ConvergenceLog, Observer};

pub const LOCK_FILE: &str = ".flowsteer.lock";
pub const MANIFEST: &str = "manifest.json";
pub const TIMING: &str = "timing.json";

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.train.threads = t;
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "output directory {} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub experiment: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_manifest(dir: &Path, experiment: &str, files: &[PathBuf]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(dir.join(f))?;
        entries.push(ManifestEntry {
            path: f.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        experiment: experiment.to_string(),
        files: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(PathBuf::from(MANIFEST))
}

fn create(dir: &Path, rel: &str) -> Result<BufWriter<File>> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Copy of the config as run: overrides applied, sample paths made absolute.
fn resolved_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    for d in [&mut out.source, &mut out.target] {
        if let DistributionConfig::Samples { path } = d {
            if path.is_relative() {
                let full = cfg.base_dir.join(&*path);
                *path = fs::canonicalize(&full).unwrap_or(full);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BenchmarkArtifacts {
    pub benchmark: Benchmark,
    pub sdp: SdpProblem,
    pub files: Vec<PathBuf>,
}

pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const BENCHMARK_SDP: &str = "benchmark.dat-s";

/// Affine-policy benchmark and SDP export. Errors (as config errors) unless the
/// system is linear and both boundaries are Gaussian.
pub fn benchmark(cfg: &ExperimentConfig, dir: &Path) -> Result<BenchmarkArtifacts> {
    let problem = cfg.steering_problem()?;
    let opts = OptimizeOptions {
        starts: cfg.benchmark.starts,
        iterations: cfg.benchmark.iterations,
        seed: cfg.train.seed,
        ..OptimizeOptions::default()
    };
    let bench = optimize_affine(&problem, &opts)?;
    let sdp = export_sdp(
        &problem,
        &ExportOptions {
            cuts_per_octave: cfg.benchmark.cuts_per_octave,
            octaves: cfg.benchmark.octaves,
        },
    )?;
    fs::create_dir_all(dir)?;
    let mut w = create(dir, BENCHMARK_CSV)?;
    writeln!(w, "instance,cost,effort,kl,start_spread")?;
    writeln!(
        w,
        "{},{},{},{},{}",
        cfg.name,
        bench.cost.total,
        bench.cost.effort,
        bench.cost.kl,
        bench.spread()
    )?;
    w.flush()?;
    let mut w = create(dir, BENCHMARK_SDP)?;
    sdp.write(&mut w)?;
    w.flush()?;
    Ok(BenchmarkArtifacts {
        benchmark: bench,
        sdp,
        files: vec![BENCHMARK_CSV.into(), BENCHMARK_SDP.into()],
    })
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    /// Paths relative to `dir`, manifest last.
    pub files: Vec<PathBuf>,
    pub log: ConvergenceLog,
    pub report: MetricsReport,
    pub benchmark: Option<Benchmark>,
}

#[derive(Serialize)]
struct Timing {
    train_seconds: f64,
    total_seconds: f64,
}

pub fn run(cfg: &ExperimentConfig, dir: &Path, progress: Option<&mut Observer<'_>>) -> Result<RunArtifacts> {
    let started = Instant::now();
    let asm = cfg.assemble()?;
    let _lock = RunLock::acquire(dir)?;
    let reproducible = cfg.eval.reproducible;
    let mut files: Vec<PathBuf> = Vec::new();

    fs::write(dir.join("config.toml"), resolved_config(cfg)?.to_toml()?)?;
    files.push("config.toml".into());

    let bench = match cfg.steering_problem() {
        Ok(_) => {
            let b = benchmark(cfg, dir)?;
            files.extend(b.files);
            Some(b.benchmark)
        }
        Err(Error::Config { .. }) => None,
        Err(e) => return Err(e),
    };

    let train_started = Instant::now();
    let (stack, log) = train(&asm.problem, asm.stack, &cfg.train, progress)?;
    let train_seconds = train_started.elapsed().as_secs_f64();

    stack.save(dir.join("policy.ckpt"))?;
    files.push("policy.ckpt".into());

    let mut w = create(dir, "convergence.csv")?;
    log.write_csv(&mut w, reproducible)?;
    w.flush()?;
    files.push("convergence.csv".into());

    let settings = ReportSettings {
        experiment: cfg.name.clone(),
        samples: cfg.eval.samples,
        seed: cfg.train.seed,
        train_seconds,
        reading: cfg.eval.logdet_reading,
        threads: cfg.train.threads,
    };
    let (metrics, batch) = report(&asm.problem, &stack, &settings)?;
    let mut w = create(dir, "metrics.csv")?;
    metrics.write_csv(&mut w, reproducible)?;
    w.flush()?;
    files.push("metrics.csv".into());

    let mut w = create(dir, "trajectories.csv")?;
    writeln!(
        w,
        "{}",
        trajectory_header(asm.problem.system.state_dim(), asm.problem.system.input_dim())
    )?;
    batch.write_csv_rows(&mut w, 0)?;
    w.flush()?;
    files.push("trajectories.csv".into());

    files.extend(emit_figures(dir)?);

    let timing = Timing {
        train_seconds,
        total_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(
        dir.join(TIMING),
        serde_json::to_string_pretty(&timing).map_err(|e| Error::Parse(e.to_string()))? + "\n",
    )?;
    files.push(write_manifest(dir, &cfg.name, &files)?);

    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        files,
        log,
        report: metrics,
        benchmark: bench,
    })
}

fn missing(dir: &Path, what: &str) -> Error {
    Error::config(
        "run directory",
        format!("{} has no {what}; run the experiment first", dir.display()),
    )
}

fn read_csv(dir: &Path, name: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(missing(dir, name));
    }
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::Parse(e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        rows.push(r.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn num(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Parse(format!("{what}: `{s}` is not a number")))
}

/// Snapshot steps `{0, N/4, N/2, 3N/4, N}`.
pub fn snapshot_steps(horizon: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=4).map(|q| q * horizon / 4).collect();
    ks.dedup();
    ks
}

/// Writes `figures/snapshot_kNNN.svg` for the snapshot steps and
/// `figures/convergence.svg` from the CSVs of a finished run.
pub fn emit_figures(dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg_path = dir.join("config.toml");
    if !cfg_path.exists() {
        return Err(missing(dir, "config.toml"));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    let horizon = cfg.system.horizon();
    let target = cfg.target.build("target", dir)?;
    let obstacles = cfg.obstacle_field()?;

    let (header, rows) = read_csv(dir, "trajectories.csv")?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("trajectories.csv has no column {name}")))
    };
    let (ck, c1) = (col("k")?, col("x_1")?);
    let c2 = col("x_2").ok();
    let mut by_step: Vec<Vec<(f64, f64)>> = vec![Vec::new(); horizon + 1];
    for r in &rows {
        let k = num(&r[ck], "k")? as usize;
        if k > horizon {
            return Err(Error::Parse(format!("trajectories.csv: step {k} beyond horizon {horizon}")));
        }
        let x = num(&r[c1], "x_1")?;
        let y = match c2 {
            Some(c) => num(&r[c], "x_2")?,
            None => 0.0,
        };
        by_step[k].push((x, y));
    }
    let ks = snapshot_steps(horizon);
    let mut bounds = Bounds::around(ks.iter().flat_map(|&k| by_step[k].iter().copied()));

    let n = target.dim();
    let mut layers = Vec::new();
    let target_pdf = target.as_target().ok().filter(|_| n == 2);
    if let Some(t) = target_pdf {
        // keep the bulk of the target visible
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Check);
        let pts = target.sample(500, &mut rng)?;
        let s = pts.samples();
        bounds = bounds.union(Bounds::around((0..s.rows()).map(|i| (s.get(i, 0), s.get(i, 1)))));
        let grid = 120;
        let peak = {
            let mut m = f64::NEG_INFINITY;
            for i in 0..=grid {
                for j in 0..=grid {
                    let x = bounds.x.0 + (bounds.x.1 - bounds.x.0) * i as f64 / grid as f64;
                    let y = bounds.y.0 + (bounds.y.1 - bounds.y.0) * j as f64 / grid as f64;
                    m = m.max(t.log_pdf(&[x, y]));
                }
            }
            m.exp()
        };
        let mut segments = Vec::new();
        for frac in [0.1, 0.3, 0.5, 0.7, 0.9] {
            segments.extend(figures::contour(
                |x, y| t.log_pdf(&[x, y]).exp(),
                &bounds,
                grid,
                grid,
                frac * peak,
            ));
        }
        layers.push(ContourLayer {
            color: "darkorange".into(),
            segments,
        });
    }
    if !obstacles.is_empty() && obstacles.position() == [0, 1] {
        let pad = |x: f64, y: f64| {
            let mut v = vec![0.0; n];
            v[0] = x;
            if n > 1 {
                v[1] = y;
            }
            obstacles.potential(&v)
        };
        let top = obstacles.max_value();
        let mut segments = Vec::new();
        for frac in [0.1, (-1.0f64).exp()] {
            segments.extend(figures::contour(pad, &bounds, 160, 160, frac * top));
        }
        layers.push(ContourLayer {
            color: "dimgray".into(),
            segments,
        });
    }

    let mut files = Vec::new();
    let labels = ("x_1", if c2.is_some() { "x_2" } else { "" });
    for &k in &ks {
        let svg = figures::scatter(
            &format!("{}: k = {k}", cfg.name),
            labels,
            &by_step[k],
            &bounds,
            &layers,
        );
        let rel = format!("figures/snapshot_k{k:03}.svg");
        let mut w = create(dir, &rel)?;
        w.write_all(svg.as_bytes())?;
        w.flush()?;
        files.push(PathBuf::from(rel));
    }

    let (header, rows) = read_csv(dir, "convergence.csv")?;
    let idx = |name: &str| header.iter().position(|h| h == name);
    let (Some(cs), Some(ce), Some(cp), Some(ct), Some(ckl)) = (
        idx("step"),
        idx("effort"),
        idx("potential"),
        idx("total"),
        idx("kl_estimate"),
    ) else {
        return Err(Error::Parse("convergence.csv has unexpected columns".into()));
    };
    let mut series = Vec::with_capacity(rows.len());
    let mut reconstructed = true;
    for r in &rows {
        let step = num(&r[cs], "step")?;
        let value = if r[ckl].is_empty() {
            reconstructed = false;
            num(&r[ct], "total")?
        } else {
            num(&r[ce], "effort")? + num(&r[cp], "potential")? + cfg.lambda * num(&r[ckl], "kl")?
        };
        series.push((step, value));
    }
    let reference = if dir.join(BENCHMARK_CSV).exists() {
        let (h, rows) = read_csv(dir, BENCHMARK_CSV)?;
        let c = h.iter().position(|x| x == "cost");
        match (c, rows.first()) {
            (Some(c), Some(r)) => Some(num(&r[c], "benchmark cost")?),
            _ => None,
        }
    } else {
        None
    };
    let title = if reconstructed {
        format!("{}: effort + potential + λ·KL", cfg.name)
    } else {
        format!("{}: training loss (KL up to a constant)", cfg.name)
    };
    let svg = figures::convergence(&title, &series, reference.map(|r| (r, "affine benchmark")));
    let rel = "figures/convergence.svg";
    let mut w = create(dir, rel)?;
    w.write_all(svg.as_bytes())?;
    w.flush()?;
    files.push(PathBuf::from(rel));
    Ok(files)
}

//! Run configuration, manifests and output files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::Trajectory;
use crate::error::{usage, Error, Result};
use crate::lattice::{Beta, SiteMap};

/// Every parameter any subcommand accepts. Subcommands reject keys they do
/// not use; unset keys take the subcommand's defaults, and the effective
/// values are echoed into the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scaling parameter.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Torus size in sites (default: n).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Exponent of the slow bond; `inf` blocks it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Beta>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// `constant:rho`, `step:a,b` or a CSV table of (u, rho).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    /// Macroscopic time horizon.
    #[arg(long, visible_alias = "T")]
    #[serde(skip_serializing_if = "Option::is_none", alias = "T")]
    pub t: Option<f64>,
    /// Comma-separated macroscopic times.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Comma-separated macroscopic positions of observed bonds.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
    /// Position of the tagged particle in `simulate`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tagged_u: Option<f64>,
    /// Number of trajectories.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads for ensembles; results do not depend on it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Grid intervals of the PDE solver.
    #[arg(long, visible_alias = "M")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_m: Option<usize>,
    /// PDE time step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// `periodic`, `robin` or `neumann`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bc: Option<String>,
    /// `crank-nicolson` or `explicit-euler`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<usize>>,
    /// Diffusive lengths kept clear on each side of the observed bonds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guard: Option<f64>,
    /// Half-width of the torus for field experiments.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    /// Absolute tolerance of the subcommand's gate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Snapshots (per unit time in `martingale`, in total in `simulate`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<usize>,
    /// Density bins in trajectory output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Write every k-th PDE time level.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub every: Option<usize>,
    /// Index into the regime's test-function family.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_index: Option<usize>,
    /// `sub`, `critical` or `super`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    /// Tagged-variance expression at beta = 1: `in-law` or `printed`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub form: Option<String>,
    /// Microscopic time of the simulator-vs-exact check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_time: Option<f64>,
}

impl RunConfig {
    /// Values set in `over` replace those in `self`.
    pub fn overlay(&self, over: &RunConfig) -> Result<RunConfig> {
        let mut base = serde_json::to_value(self)?;
        let top = serde_json::to_value(over)?;
        if let (Some(b), Some(t)) = (base.as_object_mut(), top.as_object()) {
            for (k, v) in t {
                b.insert(k.clone(), v.clone());
            }
        }
        Ok(serde_json::from_value(base)?)
    }

    /// Names of the keys that are set.
    pub fn keys(&self) -> Result<Vec<String>> {
        let v = serde_json::to_value(self)?;
        Ok(v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default())
    }

    pub fn reject_keys_outside(&self, allowed: &[&str], command: &str) -> Result<()> {
        let extra: Vec<String> = self
            .keys()?
            .into_iter()
            .filter(|k| !allowed.contains(&k.as_str()))
            .collect();
        if extra.is_empty() {
            Ok(())
        } else {
            usage(format!("{command} does not take: {}", extra.join(", ")))
        }
    }

    /// Reads a TOML file, a JSON config, or a JSON manifest (whose effective
    /// config is used).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
            let body = match value.get("config") {
                Some(c) if value.get("command").is_some() => c.clone(),
                _ => value,
            };
            serde_json::from_value(body).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
        }
    }
}

/// Takes the value of `slot`, storing `default` there first if it is unset.
pub fn resolve<T: Clone>(slot: &mut Option<T>, default: T) -> T {
    slot.get_or_insert(default).clone()
}

pub fn require<T: Clone>(slot: &Option<T>, flag: &str) -> Result<T> {
    slot.clone()
        .ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// SHA-256 of the canonical JSON of `(command, version, config)`.
    pub input_hash: String,
    /// SHA-256 of each output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub seeds: Vec<crate::stats::SeedRange>,
    pub events: u64,
    pub wall_time_s: f64,
    pub passed: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn input_hash(command: &str, config: &RunConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Inputs<'a> {
        command: &'a str,
        version: &'a str,
        config: &'a RunConfig,
    }
    let bytes = serde_json::to_vec(&Inputs {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Collects the files of one run and writes them under `dir`.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
    summary: Vec<String>,
}

impl OutputDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            files: BTreeMap::new(),
            summary: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        if name.contains('/') || name.contains('\\') || name.starts_with('.') {
            return usage(format!("output name {name:?} must be a plain file name"));
        }
        self.files.insert(name.to_string(), bytes);
        Ok(())
    }

    /// Adds a CSV produced by `write`.
    pub fn add_csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf)
    }

    pub fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }

    /// `PASS`/`FAIL` line for one gate.
    pub fn gate(&mut self, ok: bool, what: impl AsRef<str>) -> bool {
        self.summary
            .push(format!("{} {}", if ok { "PASS" } else { "FAIL" }, what.as_ref()));
        ok
    }

    pub fn summary(&self) -> &[String] {
        &self.summary
    }

    /// Writes all files plus `summary.txt` and `manifest.json`.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<Manifest> {
        fs::create_dir_all(&self.dir)?;
        let mut summary = self.summary.join("\n");
        summary.push('\n');
        summary.push_str(if manifest.passed {
            "overall: PASS\n"
        } else {
            "overall: FAIL\n"
        });
        self.files.insert("summary.txt".into(), summary.into_bytes());
        for (name, bytes) in &self.files {
            manifest.outputs.insert(name.clone(), sha256_hex(bytes));
            fs::write(self.dir.join(name), bytes)?;
        }
        let mut f = fs::File::create(self.dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// Trajectory table: `macro_time`, the density in `bins` equal bins of the
/// torus, the raw current through each watched bond and the tagged
/// displacement, one row per snapshot.
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory, map: &SiteMap, us: &[f64], bins: usize) -> Result<()> {
    if bins == 0 || bins > map.sites() {
        return usage(format!("bins must be in 1..={}", map.sites()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["macro_time".to_string()];
    header.extend((0..bins).map(|b| format!("density_{b}")));
    header.extend(us.iter().map(|u| format!("current_u={u}")));
    if traj.tagged.is_some() {
        header.push("tagged_displacement".into());
    }
    w.write_record(&header)?;
    let sites = map.sites();
    for snap in &traj.snapshots {
        let mut rec = vec![snap.clock.macro_time.to_string()];
        let mut mass = vec![0usize; bins];
        let mut width = vec![0usize; bins];
        for (x, &e) in snap.config.occupancy().iter().enumerate() {
            let b = x * bins / sites;
            mass[b] += e as usize;
            width[b] += 1;
        }
        rec.extend(
            mass.iter()
                .zip(&width)
                .map(|(m, w)| (*m as f64 / *w as f64).to_string()),
        );
        rec.extend(snap.currents.iter().map(|j| j.to_string()));
        if let Some(t) = snap.tagged {
            rec.push(t.displacement.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

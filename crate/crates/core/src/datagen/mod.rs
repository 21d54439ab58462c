//! Trajectory generators for 2D Navier–Stokes and FitzHugh–Nagumo, and the
//! on-disk dataset format.

pub mod container;
mod fhn;
mod ns;

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::Tensor;
use container::{decode_tensor, encode_tensor, write_atomic, FileDtype};

pub use fhn::{simulate_fhn, FhnParams, FhnState};
pub use ns::{enstrophy, simulate_ns, NsParams, NsSolver};

pub const DATASET_FORMAT: u32 = 1;

/// Integer wavenumber of FFT index `i` on an `n`-point periodic grid.
pub(crate) fn wavenumber(i: usize, n: usize) -> f64 {
    if i < n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Independent RNG stream for trajectory `index`.
pub(crate) fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pde {
    NavierStokes(NsParams),
    FitzhughNagumo(FhnParams),
}

impl Pde {
    pub fn n(&self) -> usize {
        match self {
            Pde::NavierStokes(p) => p.n,
            Pde::FitzhughNagumo(p) => p.n,
        }
    }

    pub fn snapshots(&self) -> usize {
        match self {
            Pde::NavierStokes(p) => p.snapshots,
            Pde::FitzhughNagumo(p) => p.snapshots,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Pde::NavierStokes(p) => p.seed,
            Pde::FitzhughNagumo(p) => p.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Config(format!("grid n = {} must be a power of two >= 4", n)));
        }
        if self.snapshots() == 0 {
            return Err(Error::Config("snapshots must be positive".into()));
        }
        let (dt, dts) = match self {
            Pde::NavierStokes(p) => (p.dt_solver, p.dt_snapshot),
            Pde::FitzhughNagumo(p) => (p.dt_solver, p.dt_snapshot),
        };
        if !(dt > 0.0 && dts > 0.0) {
            return Err(Error::Config("dt_solver and dt_snapshot must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub pde: Pde,
    pub seed: u64,
    pub count: usize,
    pub snapshots: usize,
    pub n: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// File name of the trajectory tensor, relative to the manifest.
    pub tensor_file: String,
}

/// `(count, T, n, n)` trajectories plus manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Tensor,
    pub manifest: DatasetManifest,
}

impl Dataset {
    fn assemble(pde: Pde, runs: Vec<Vec<f64>>, n_train: usize) -> Result<Self> {
        let count = runs.len();
        let (t, n) = (pde.snapshots(), pde.n());
        let mut data = Vec::with_capacity(count * t * n * n);
        for run in runs {
            // values are stored as real32, so keep exactly what a reload returns
            data.extend(run.into_iter().map(|v| v as f32 as f64));
        }
        let trajectories = Tensor::from_real(&[count, t, n, n], data)?;
        let n_train = n_train.min(count);
        Ok(Self {
            trajectories,
            manifest: DatasetManifest {
                format_version: DATASET_FORMAT,
                seed: pde.seed(),
                pde,
                count,
                snapshots: t,
                n,
                train: (0..n_train).collect(),
                test: (n_train..count).collect(),
                tensor_file: String::new(),
            },
        })
    }

    pub fn count(&self) -> usize {
        self.manifest.count
    }

    pub fn n(&self) -> usize {
        self.manifest.n
    }

    pub fn snapshots(&self) -> usize {
        self.manifest.snapshots
    }

    /// Snapshots `start..start+len` of one trajectory as `(len, n, n)`.
    pub fn window(&self, index: usize, start: usize, len: usize) -> Result<Tensor> {
        let (t, n) = (self.snapshots(), self.n());
        if index >= self.count() || start + len > t {
            return Err(Error::Shape(format!(
                "window {}..{} of trajectory {} outside ({}, {})",
                start,
                start + len,
                index,
                self.count(),
                t
            )));
        }
        let plane = n * n;
        let base = (index * t + start) * plane;
        Tensor::from_real(&[len, n, n], self.trajectories.re()[base..base + len * plane].to_vec())
    }

    /// Input frames `0..t_in` and targets `t_in..t_in+t_out`.
    pub fn sample(&self, index: usize, t_in: usize, t_out: usize) -> Result<(Tensor, Tensor)> {
        Ok((self.window(index, 0, t_in)?, self.window(index, t_in, t_out)?))
    }

    /// Copy whose train/test splits are truncated to the first `n_train`
    /// and `n_test` entries.
    pub fn with_split_sizes(&self, n_train: usize, n_test: usize) -> Result<Self> {
        if n_train > self.manifest.train.len() || n_test > self.manifest.test.len() {
            return Err(Error::Config(format!(
                "requested {} train / {} test trajectories, dataset has {} / {}",
                n_train,
                n_test,
                self.manifest.train.len(),
                self.manifest.test.len()
            )));
        }
        let mut out = self.clone();
        out.manifest.train.truncate(n_train);
        out.manifest.test.truncate(n_test);
        Ok(out)
    }
}

pub fn gen_navier_stokes(params: &NsParams, count: usize, n_train: usize) -> Result<Dataset> {
    let pde = Pde::NavierStokes(params.clone());
    pde.validate()?;
    let runs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(params.seed, i);
            let w0 = ns::random_vorticity(params.n, &mut rng);
            simulate_ns(params, &w0).map(|snaps| snaps.into_iter().flatten().collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Dataset::assemble(pde, runs, n_train)
}

pub fn gen_fitzhugh_nagumo(params: &FhnParams, count: usize, n_train: usize) -> Result<Dataset> {
    let pde = Pde::FitzhughNagumo(params.clone());
    pde.validate()?;
    let runs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(params.seed, i);
            let state = fhn::random_state(params.n, &mut rng);
            simulate_fhn(params, state).map(|snaps| snaps.into_iter().flat_map(|s| s.u).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Dataset::assemble(pde, runs, n_train)
}

pub fn dataset_manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the real32 trajectory tensor at `path` and its manifest beside
/// it; returns both paths.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    let mut manifest = ds.manifest.clone();
    manifest.tensor_file = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut buf = Vec::new();
    encode_tensor(&mut buf, &ds.trajectories, FileDtype::Real32)?;
    let mpath = dataset_manifest_path(path);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    write_atomic(path, &buf)?;
    write_atomic(&mpath, &json)?;
    Ok(vec![path.to_path_buf(), mpath])
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = dataset_manifest_path(path);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Json { path: mpath.clone(), source: e })?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(Error::Incompatible(format!(
            "dataset format {} (expected {})",
            manifest.format_version, DATASET_FORMAT
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (trajectories, _, end) = decode_tensor(&bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::Parse {
            offset: end as u64,
            reason: format!("{} trailing bytes after payload", bytes.len() - end),
        });
    }
    let want = [manifest.count, manifest.snapshots, manifest.n, manifest.n];
    if trajectories.shape() != want {
        return Err(Error::Incompatible(format!(
            "manifest dims {:?} disagree with tensor header {:?}",
            want,
            trajectories.shape()
        )));
    }
    if manifest.train.iter().any(|i| manifest.test.contains(i)) {
        return Err(Error::Incompatible("train and test splits overlap".into()));
    }
    if manifest.train.iter().chain(&manifest.test).any(|&i| i >= manifest.count) {
        return Err(Error::Incompatible("split index out of range".into()));
    }
    manifest.tensor_file.clear();
    Ok(Dataset {
        trajectories,
        manifest,
    })
}

#[cfg(test)]
mod tests;

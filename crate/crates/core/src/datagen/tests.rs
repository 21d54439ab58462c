use super::*;
use super::ns::{random_vorticity, spectrum_of};
use crate::numkern::Complex64;

fn grid(n: usize) -> impl Iterator<Item = (f64, f64)> {
    let h = 2.0 * std::f64::consts::PI / n as f64;
    (0..n * n).map(move |p| ((p / n) as f64 * h, (p % n) as f64 * h))
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Classical RK4 on a system of ODEs.
fn rk4<const D: usize>(mut x: [f64; D], f: impl Fn(&[f64; D]) -> [f64; D], dt: f64, steps: usize) -> [f64; D] {
    let axpy = |x: &[f64; D], k: &[f64; D], s: f64| {
        let mut out = *x;
        for i in 0..D {
            out[i] += s * k[i];
        }
        out
    };
    for _ in 0..steps {
        let k1 = f(&x);
        let k2 = f(&axpy(&x, &k1, dt / 2.0));
        let k3 = f(&axpy(&x, &k2, dt / 2.0));
        let k4 = f(&axpy(&x, &k3, dt));
        for i in 0..D {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

#[test]
fn shear_flow_decays_exponentially() {
    let params = NsParams {
        forcing_amp: 0.0,
        snapshots: 2,
        ..NsParams::default()
    };
    let w0: Vec<f64> = grid(params.n).map(|(_, y)| y.sin()).collect();
    let out = simulate_ns(&params, &w0).unwrap();
    let decay = (-params.nu).exp();
    let err = out[1]
        .iter()
        .zip(&w0)
        .map(|(w, s)| (w - decay * s).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-6, "max error {}", err);
}

#[test]
fn mean_vorticity_stays_zero() {
    let params = NsParams {
        snapshots: 5,
        ..NsParams::default()
    };
    let w0 = random_vorticity(params.n, &mut trajectory_rng(1, 0));
    for w in simulate_ns(&params, &w0).unwrap() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 1e-10, "mean {}", mean);
    }
}

#[test]
fn ns_self_convergence() {
    let coarse = NsParams {
        snapshots: 3,
        ..NsParams::default()
    };
    let fine = NsParams {
        dt_solver: coarse.dt_solver / 2.0,
        ..coarse.clone()
    };
    let w0 = random_vorticity(coarse.n, &mut trajectory_rng(2, 0));
    let a = simulate_ns(&coarse, &w0).unwrap();
    let b = simulate_ns(&fine, &w0).unwrap();
    let d = rel_diff(a.last().unwrap(), b.last().unwrap());
    assert!(d < 1e-5, "relative change {}", d);
}

#[test]
fn unforced_enstrophy_does_not_grow() {
    let params = NsParams {
        forcing_amp: 0.0,
        snapshots: 10,
        ..NsParams::default()
    };
    let w0 = random_vorticity(params.n, &mut trajectory_rng(3, 0));
    let out = simulate_ns(&params, &w0).unwrap();
    for pair in out.windows(2) {
        assert!(enstrophy(&pair[1]) <= enstrophy(&pair[0]) + 1e-9);
    }
}

#[test]
fn advection_is_dealiased() {
    let params = NsParams {
        forcing_amp: 0.0,
        ..NsParams::default()
    };
    let n = params.n;
    let cutoff = n as f64 / 3.0;
    let kept = |p: usize| wavenumber(p / n, n).abs() < cutoff && wavenumber(p % n, n).abs() < cutoff;
    // random field band-limited to the retained modes
    let w = random_vorticity(n, &mut trajectory_rng(4, 0));
    let mut spec = spectrum_of(&w);
    for (p, z) in spec.iter_mut().enumerate() {
        if !kept(p) {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    let solver = NsSolver::new(&params, params.dt_solver);
    let (rhs, _) = solver.rhs(&spec);
    solver.step(&mut spec, 0).unwrap();
    for p in (0..n * n).filter(|&p| !kept(p)) {
        assert!(rhs[p].norm() == 0.0);
        assert!(spec[p].norm() < 1e-12);
    }
}

#[test]
fn cfl_violation_aborts() {
    let params = NsParams {
        dt_solver: 0.5,
        dt_snapshot: 1.0,
        snapshots: 2,
        ..NsParams::default()
    };
    let w0: Vec<f64> = random_vorticity(params.n, &mut trajectory_rng(5, 0)).iter().map(|v| 100.0 * v).collect();
    match simulate_ns(&params, &w0) {
        Err(Error::SolverAbort { step, reason }) => {
            assert_eq!(step, 0);
            assert!(reason.contains("CFL"));
        }
        other => panic!("expected abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn random_vorticity_is_normalized() {
    let w = random_vorticity(32, &mut trajectory_rng(6, 0));
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean.abs() < 1e-12);
    assert!((enstrophy(&w) - 1.0).abs() < 1e-12);
}

fn fhn_ode(p: &FhnParams) -> impl Fn(&[f64; 2]) -> [f64; 2] + '_ {
    move |x| [x[0] - x[0].powi(3) / 3.0 - x[1], p.eps * (x[0] + p.a - p.b * x[1])]
}

#[test]
fn uniform_fhn_matches_ode() {
    let params = FhnParams {
        n: 4,
        dt_solver: 1e-3,
        snapshots: 10,
        ..FhnParams::default()
    };
    let (u0, v0) = (0.8, -0.3);
    let cells = params.n * params.n;
    let out = simulate_fhn(&params, FhnState { u: vec![u0; cells], v: vec![v0; cells] }).unwrap();
    let f = fhn_ode(&params);
    let mut x = [u0, v0];
    for (s, state) in out.iter().enumerate() {
        if s > 0 {
            x = rk4(x, &f, 1e-4, 10_000);
        }
        for q in 0..cells {
            assert!((state.u[q] - x[0]).abs() < 1e-6, "snapshot {} u {} vs {}", s, state.u[q], x[0]);
            assert!((state.v[q] - x[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn decoupled_fhn_is_pointwise_ode() {
    let params = FhnParams {
        n: 8,
        du: 0.0,
        dv: 0.0,
        eps: 0.0,
        dt_solver: 1e-3,
        snapshots: 4,
        ..FhnParams::default()
    };
    let init = fhn::random_state(params.n, &mut trajectory_rng(7, 0));
    let out = simulate_fhn(&params, init.clone()).unwrap();
    for q in 0..params.n * params.n {
        let v0 = init.v[q];
        let f = |x: &[f64; 1]| [x[0] - x[0].powi(3) / 3.0 - v0];
        let mut x = [init.u[q]];
        for state in &out[1..] {
            x = rk4(x, f, 1e-4, 10_000);
            assert!((state.u[q] - x[0]).abs() < 1e-6);
            assert!((state.v[q] - v0).abs() < 1e-12);
        }
    }
}

#[test]
fn default_fhn_stays_bounded() {
    let params = FhnParams::default();
    let init = fhn::random_state(params.n, &mut trajectory_rng(8, 0));
    assert!(init.u.iter().all(|x| (-1.0..=1.0 + 1e-12).contains(x)));
    let out = simulate_fhn(&params, init).unwrap();
    assert_eq!(out.len(), 30);
    let max = out.iter().flat_map(|s| s.u.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(max.is_finite() && max < 3.0, "max |u| = {}", max);
}

#[test]
fn fhn_blowup_aborts_with_step() {
    let params = FhnParams {
        n: 4,
        dt_solver: 1.0,
        snapshots: 10,
        ..FhnParams::default()
    };
    let cells = params.n * params.n;
    match simulate_fhn(&params, FhnState { u: vec![50.0; cells], v: vec![0.0; cells] }) {
        Err(Error::SolverAbort { step, .. }) => assert!(step >= 1),
        other => panic!("expected abort, got {:?}", other.map(|_| ())),
    }
}

fn small_ns() -> NsParams {
    NsParams {
        n: 16,
        snapshots: 4,
        seed: 11,
        ..NsParams::default()
    }
}

#[test]
fn generation_is_independent_of_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| gen_navier_stokes(&small_ns(), 5, 3).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(4));
    let fhn = FhnParams {
        n: 16,
        snapshots: 3,
        ..FhnParams::default()
    };
    let pool = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    assert_eq!(
        pool(1).install(|| gen_fitzhugh_nagumo(&fhn, 4, 2).unwrap()),
        pool(3).install(|| gen_fitzhugh_nagumo(&fhn, 4, 2).unwrap())
    );
}

#[test]
fn trajectories_use_distinct_streams() {
    let ds = gen_navier_stokes(&small_ns(), 2, 1).unwrap();
    assert_ne!(ds.window(0, 0, 1).unwrap(), ds.window(1, 0, 1).unwrap());
    let other = gen_navier_stokes(&NsParams { seed: 12, ..small_ns() }, 2, 1).unwrap();
    assert_ne!(ds.window(0, 0, 1).unwrap(), other.window(0, 0, 1).unwrap());
}

#[test]
fn dataset_roundtrip_is_bit_identical() {
    let ds = gen_navier_stokes(&small_ns(), 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ns.lgnk");
    let files = write_dataset(&path, &ds).unwrap();
    assert_eq!(files, vec![path.clone(), dir.path().join("ns.json")]);
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.manifest.train, vec![0, 1]);
    assert_eq!(back.manifest.test, vec![2]);
    let text = std::fs::read_to_string(dir.path().join("ns.json")).unwrap();
    assert!(text.contains("\"kind\": \"navier_stokes\""));
    assert!(text.contains("\"tensor_file\": \"ns.lgnk\""));
}

#[test]
fn read_rejects_overlapping_splits_and_dim_mismatch() {
    let ds = gen_navier_stokes(&small_ns(), 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.lgnk");
    write_dataset(&path, &ds).unwrap();
    let mpath = dataset_manifest_path(&path);
    let original: DatasetManifest = serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();

    let mut m = original.clone();
    m.test.push(0);
    std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Incompatible(_))));

    let mut m = original.clone();
    m.snapshots += 1;
    std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Incompatible(_))));

    let mut m = serde_json::to_value(&original).unwrap();
    m["extra"] = serde_json::json!(1);
    std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Json { .. })));
}

#[test]
fn samples_split_input_and_target_windows() {
    let ds = gen_navier_stokes(&small_ns(), 2, 1).unwrap();
    let (x, y) = ds.sample(1, 2, 2).unwrap();
    assert_eq!(x, ds.window(1, 0, 2).unwrap());
    assert_eq!(y, ds.window(1, 2, 2).unwrap());
    assert!(ds.sample(1, 3, 2).is_err());
    let sub = ds.with_split_sizes(1, 0).unwrap();
    assert!(sub.manifest.test.is_empty());
    assert!(ds.with_split_sizes(2, 0).is_err());
}

#[test]
fn stored_values_are_real32_exact() {
    let ds = gen_navier_stokes(&small_ns(), 1, 1).unwrap();
    assert!(ds.trajectories.re().iter().all(|&v| v as f32 as f64 == v));
}

#[test]
fn invalid_grid_is_rejected() {
    let bad = NsParams { n: 12, ..small_ns() };
    assert!(matches!(gen_navier_stokes(&bad, 1, 1), Err(Error::Config(_))));
}

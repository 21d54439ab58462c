use super::*;
use crate::generator::softplus;
use crate::numkern::{expm_call_count, reset_expm_call_count};

fn small() -> ModelConfig {
    ModelConfig {
        n: 16,
        t_in: 3,
        t_out: 4,
        r: 4,
        m: 4,
        w: 6,
        hidden: 8,
        variant: Variant::Sd,
        seed: 7,
    }
}

fn frames(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.t_in * cfg.n * cfg.n;
    Tensor::from_real(&[cfg.t_in, cfg.n, cfg.n], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Parameters with a strongly rotating generator, so propagation visibly
/// changes the latent block.
fn rotating(cfg: &ModelConfig) -> ModelParams {
    let mut p = init_model(cfg).unwrap();
    for v in p.get_mut(PATH_P).re_mut() {
        *v *= 50.0;
    }
    p
}

fn zero_all(p: &mut ModelParams, prefix: &str) {
    let names: Vec<String> = p.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for name in names {
        let t = p.get_mut(&name);
        *t = Tensor::zeros_like(t);
    }
}

#[test]
fn init_is_deterministic() {
    let a = init_model(&small()).unwrap();
    let b = init_model(&small()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
    let mut other = small();
    other.seed = 8;
    assert_ne!(init_model(&other).unwrap().checksum(), a.checksum());
}

#[test]
fn default_model_reports_560_interpretable_parameters() {
    let p = init_model(&ModelConfig::default()).unwrap();
    assert_eq!(p.interpretable_count(), 560);
}

#[test]
fn init_rejects_too_many_modes() {
    let mut cfg = small();
    cfg.m = 9;
    match init_model(&cfg) {
        Err(Error::Config(msg)) => assert!(msg.contains("M ≤ n/2")),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn init_distributions_respect_bounds() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let lift = p.get("encoder.lift.weight");
    let bound = 1.0 / ((cfg.t_in + 2) as f64).sqrt();
    assert!(lift.re().iter().all(|v| v.abs() <= bound));
    let bias = p.get("encoder.lift.bias");
    assert!(bias.re().iter().all(|v| v.abs() <= bound));
    let hb = 1.0 / (cfg.hidden as f64).sqrt();
    assert!(p.get("decoder.out.weight").re().iter().all(|v| v.abs() <= hb));
    let scale = 1.0 / (cfg.w * cfg.w) as f64;
    for z in p.get("encoder.block0.spectral.weight").cx() {
        assert!((0.0..scale).contains(&z.re) && (0.0..scale).contains(&z.im));
    }
    assert!(p.get(PATH_D).re().iter().all(|&v| v == -3.0));
    assert!(p.get(PATH_ALPHA).re().iter().all(|&v| v == -3.0));
}

#[test]
fn initial_spectrum_is_damped() {
    let p = init_model(&small()).unwrap();
    let max_re = crate::train::max_re_lambda(&p).unwrap();
    assert!(max_re <= -softplus(-3.0) + 1e-12, "max Re = {}", max_re);
}

#[test]
fn encode_shapes_and_block() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let s = encode(&frames(&cfg, 1), &p).unwrap();
    assert_eq!(s.z0.shape(), [cfg.r, cfg.n, cfg.n]);
    assert!(!s.z0.is_complex());
    assert_eq!(s.full_spectrum.shape(), [cfg.r, cfg.n, cfg.n]);
    assert_eq!(s.c0.shape(), [cfg.r, cfg.m, cfg.m]);
    let (n, m) = (cfg.n, cfg.m);
    for c in 0..cfg.r {
        for i in 0..m {
            for j in 0..m {
                assert_eq!(s.c0.cx()[c * m * m + i * m + j], s.full_spectrum.cx()[c * n * n + i * n + j]);
            }
        }
    }
}

#[test]
fn encode_rejects_wrong_frame_shape() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let bad = Tensor::zeros(&[cfg.t_in + 1, cfg.n, cfg.n], Dtype::Real);
    assert!(matches!(encode(&bad, &p), Err(Error::Shape(_))));
    let bad_z = Tensor::zeros(&[cfg.r + 1, cfg.n, cfg.n], Dtype::Real);
    assert!(matches!(decode(&bad_z, &p), Err(Error::Shape(_))));
}

#[test]
fn zero_encoder_gives_zero_latent() {
    let cfg = small();
    let mut p = init_model(&cfg).unwrap();
    zero_all(&mut p, "encoder.");
    let s = encode(&frames(&cfg, 2), &p).unwrap();
    assert!(s.z0.re().iter().all(|&v| v == 0.0));
    assert!(s.c0.cx().iter().all(|z| z.norm() == 0.0));
}

#[test]
fn spectral_step_at_zero_recovers_z0() {
    let cfg = small();
    let p = rotating(&cfg);
    let s = encode(&frames(&cfg, 3), &p).unwrap();
    let z = spectral_step(&s, &p, 0.0).unwrap();
    for (a, b) in z.re().iter().zip(s.z0.re()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn conj_mirror(i: usize, n: usize) -> usize {
    (n - i) % n
}

#[test]
fn modes_outside_block_are_carried_unchanged() {
    let cfg = small();
    let p = rotating(&cfg);
    let s = encode(&frames(&cfg, 4), &p).unwrap();
    let spec = |t: f64| hermitian_embed(&s.full_spectrum, &propagate_latent(&s, &p, t).unwrap()).unwrap();
    let (a, b) = (spec(0.0), spec(7.0));
    let (n, m) = (cfg.n, cfg.m);
    let mut touched = vec![false; n * n];
    for i in 0..m {
        for j in 0..m {
            touched[i * n + j] = true;
            touched[conj_mirror(i, n) * n + conj_mirror(j, n)] = true;
        }
    }
    let mut changed = 0;
    for c in 0..cfg.r {
        for idx in 0..n * n {
            let (za, zb) = (a.cx()[c * n * n + idx], b.cx()[c * n * n + idx]);
            if touched[idx] {
                changed += usize::from(za != zb);
            } else {
                assert_eq!(za, zb);
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn spectral_step_output_is_real() {
    let cfg = small();
    let p = rotating(&cfg);
    let s = encode(&frames(&cfg, 5), &p).unwrap();
    for t in [0.5, 3.0, 40.0] {
        let field = fft2(&hermitian_embed(&s.full_spectrum, &propagate_latent(&s, &p, t).unwrap()).unwrap(), Direction::Inverse)
            .unwrap();
        let residue = field.cx().iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        assert!(residue < IMAG_RESIDUE_TOL, "residue {}", residue);
        spectral_step(&s, &p, t).unwrap();
    }
}

#[test]
fn decode_is_pointwise_equivariant() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = Tensor::from_real(&[cfg.r, n, n], (0..cfg.r * n * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    // pixel permutation: transpose plus a cyclic shift
    let perm = |p: usize| ((p % n + 3) % n) * n + p / n;
    let mut zp = z.clone();
    for c in 0..cfg.r {
        for q in 0..n * n {
            zp.re_mut()[c * n * n + perm(q)] = z.re()[c * n * n + q];
        }
    }
    let (y, yp) = (decode(&z, &p).unwrap(), decode(&zp, &p).unwrap());
    for q in 0..n * n {
        assert_eq!(yp.re()[perm(q)], y.re()[q]);
    }
}

#[test]
fn zero_decoder_weights_give_bias_field() {
    let cfg = small();
    let mut p = init_model(&cfg).unwrap();
    for name in ["decoder.hidden.weight", "decoder.out.weight"] {
        let t = p.get_mut(name);
        *t = Tensor::zeros_like(t);
    }
    let bias = p.get("decoder.out.bias").re()[0];
    let z = Tensor::from_real(&[cfg.r, cfg.n, cfg.n], vec![0.3; cfg.r * cfg.n * cfg.n]).unwrap();
    let y = decode(&z, &p).unwrap();
    assert_eq!(y.shape(), [cfg.n, cfg.n]);
    assert!(y.re().iter().all(|&v| v == bias));
}

#[test]
fn forward_shapes_and_continuous_time() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let x = frames(&cfg, 7);
    assert_eq!(forward(&x, &p, &cfg.times()).unwrap().shape(), [cfg.t_out, cfg.n, cfg.n]);
    let y = forward(&x, &p, &[2.5]).unwrap();
    assert_eq!(y.shape(), [1, cfg.n, cfg.n]);
    assert!(y.is_finite());
    assert!(matches!(forward(&x, &p, &[]), Err(Error::Contract(_))));
}

#[test]
fn long_horizon_uses_one_exponential_per_mode() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let x = frames(&cfg, 8);
    reset_expm_call_count();
    forward(&x, &p, &[200.0]).unwrap();
    assert_eq!(expm_call_count(), (cfg.m * cfg.m) as u64);
    reset_expm_call_count();
    forward(&x, &p, &cfg.times()).unwrap();
    assert_eq!(expm_call_count(), (cfg.t_out * cfg.m * cfg.m) as u64);
}

#[test]
fn forward_matches_composition() {
    let cfg = small();
    let p = rotating(&cfg);
    let x = frames(&cfg, 9);
    let times = [1.0, 4.5];
    let y = forward(&x, &p, &times).unwrap();
    let s = encode(&x, &p).unwrap();
    let plane = cfg.n * cfg.n;
    for (i, &t) in times.iter().enumerate() {
        let yt = decode(&spectral_step(&s, &p, t).unwrap(), &p).unwrap();
        for (a, b) in y.re()[i * plane..(i + 1) * plane].iter().zip(yt.re()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = small();
    let p = rotating(&cfg);
    let x = frames(&cfg, 10);
    assert_eq!(forward(&x, &p, &[1.0, 3.0]).unwrap(), forward(&x, &p, &[1.0, 3.0]).unwrap());
}

#[test]
fn latent_energy_is_contractive_and_non_increasing() {
    let cfg = small();
    let p = rotating(&cfg);
    let s = encode(&frames(&cfg, 11), &p).unwrap();
    let e0 = s.c0.norm();
    let mut prev = e0;
    for t in [1.0, 10.0, 50.0, 100.0, 200.0] {
        let e = propagate_latent(&s, &p, t).unwrap().norm();
        assert!(e <= e0 * (1.0 + 1e-12));
        assert!(e <= prev + 1e-9);
        prev = e;
        let y = decode(&spectral_step(&s, &p, t).unwrap(), &p).unwrap();
        assert!(y.is_finite());
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = small();
    let p = rotating(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lgnk");
    let mut ckpt = Checkpoint::new(p.clone());
    ckpt.epoch = 12;
    let files = save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(files, vec![path.clone(), manifest_path(&path)]);
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.params.checksum(), p.checksum());
    let m = read_manifest(&path).unwrap();
    assert_eq!(m.tensors, p.names().map(String::from).collect::<Vec<_>>());
}

#[test]
fn checkpoint_rejects_trailing_bytes_and_missing_tensors() {
    let cfg = small();
    let p = init_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lgnk");
    save_checkpoint(&path, &Checkpoint::new(p)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    let mut m = read_manifest(&path).unwrap();
    m.tensors.pop();
    std::fs::write(manifest_path(&path), serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let cfg = ModelConfig::tiny();
    let p = rotating(&cfg);
    let (x1, x2) = (frames(&cfg, 12), frames(&cfg, 13));
    let (y1, y2) = (frames(&cfg, 14), frames(&cfg, 15));
    let times = cfg.times();
    let (l1, g1) = loss_and_grads(&p, &x1, &y1, &times).unwrap();
    let (l2, g2) = loss_and_grads(&p, &x2, &y2, &times).unwrap();
    let props = propagators(&p, &times).unwrap();
    let (l, g) = batch_grads(&p, &props, &[(&x1, &y1), (&x2, &y2)]).unwrap();
    assert!((l - 0.5 * (l1 + l2)).abs() < 1e-15);
    assert_eq!(g.keys().collect::<Vec<_>>(), p.names().collect::<Vec<_>>().iter().collect::<Vec<_>>());
    for (path, gb) in &g {
        for i in 0..gb.n_components() {
            let want = 0.5 * (g1[path].component(i) + g2[path].component(i));
            assert!((gb.component(i) - want).abs() <= 1e-12 * (1.0 + want.abs()), "{}", path);
        }
    }
}

use super::render::*;
use super::*;
use crate::datagen::{gen_fitzhugh_nagumo, FhnParams};
use crate::generator::{Variant, PATH_ALPHA, PATH_D, PATH_P};
use crate::model::{init_model, ModelConfig};

fn config(variant: Variant, r: usize, m: usize) -> ModelConfig {
    ModelConfig {
        n: 2 * m.next_power_of_two(),
        t_in: 2,
        t_out: 2,
        r,
        m,
        w: 4,
        hidden: 4,
        variant,
        seed: 5,
    }
}

/// Generator parameters with O(1) spread so spectra are non-degenerate.
fn spread(variant: Variant, r: usize, m: usize, seed: u64) -> ModelParams {
    let mut p = init_model(&ModelConfig { seed, ..config(variant, r, m) }).unwrap();
    let names: Vec<String> = p.names().filter(|n| n.starts_with("generator.")).map(String::from).collect();
    for (j, name) in names.iter().enumerate() {
        for (i, v) in p.get_mut(name).re_mut().iter_mut().enumerate() {
            *v = if name == PATH_P {
                *v * 40.0
            } else {
                ((i * 7 + j * 3 + seed as usize) % 11) as f64 / 5.0 - 1.0
            };
        }
    }
    p
}

fn parse_svg(s: &str) -> usize {
    let doc = roxmltree::Document::parse(s).expect("well-formed svg");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants().filter(|n| n.attribute("class") == Some("eig")).count()
}

#[test]
fn default_size_spectrum_has_4608_rows() {
    let p = init_model(&ModelConfig::default()).unwrap();
    let rep = spectrum_report(&p).unwrap();
    assert_eq!(rep.rows.len(), 4608);
    assert_eq!(rep.summary.count, 4608);
    assert!(rep.summary.max_re <= -crate::generator::softplus(-3.0) + 1e-9);
}

#[test]
fn s_only_spectrum_is_imaginary() {
    let p = spread(Variant::SOnly, 6, 4, 1);
    let rep = spectrum_report(&p).unwrap();
    assert!(rep.rows.iter().all(|r| r.lambda.re.abs() < 1e-12));
    assert!(rep.summary.im_max > 0.1);
    assert!((rep.summary.im_min + rep.summary.im_max).abs() < 1e-9);
}

#[test]
fn d_only_fit_is_exactly_linear() {
    let mut p = spread(Variant::DOnly, 4, 5, 2);
    // channel 2 has the least damping at every |k|^2
    p.get_mut(PATH_D).re_mut().copy_from_slice(&[0.5, 1.0, -2.0, 0.0]);
    p.get_mut(PATH_ALPHA).re_mut().copy_from_slice(&[0.3, 0.8, -1.0, 0.1]);
    let fit = fit_dissipation(&p).unwrap();
    let ksq_max = p.config.grid().ksq_max;
    let slope = -crate::generator::softplus(-1.0) / ksq_max;
    assert!((fit.dominant.slope - slope).abs() < 1e-12);
    assert!((fit.dominant.intercept + crate::generator::softplus(-2.0)).abs() < 1e-12);
    assert!((fit.dominant.r_squared - 1.0).abs() < 1e-12);
    assert_eq!(fit.branches.len(), 4);
    assert!(fit.branches.iter().all(|b| (b.fit.r_squared - 1.0).abs() < 1e-12));
    assert_eq!(fit.points.len(), 25);
}

#[test]
fn self_comparison_is_perfect() {
    let p = spread(Variant::Sd, 6, 3, 3);
    let rep = compare_universality(&p, &p).unwrap();
    assert!((rep.cosine_sim_s - 1.0).abs() < 1e-12);
    assert_eq!(rep.r2_singvals, 1.0);
    assert_eq!(rep.r2_sorted_d, 1.0);
    assert_eq!(rep.r2_sorted_alpha, 1.0);
}

#[test]
fn comparison_cosine_is_symmetric() {
    let a = spread(Variant::Sd, 6, 3, 3);
    let b = spread(Variant::Sd, 6, 3, 8);
    let ab = compare_universality(&a, &b).unwrap();
    let ba = compare_universality(&b, &a).unwrap();
    assert!((ab.cosine_sim_s - ba.cosine_sim_s).abs() < 1e-12);
    assert!(ab.cosine_sim_s.abs() <= 1.0);
    assert_eq!(ab.profiles.d_a, ba.profiles.d_b);
    let other_r = spread(Variant::Sd, 4, 3, 3);
    assert!(matches!(compare_universality(&a, &other_r), Err(Error::Incompatible(_))));
}

#[test]
fn universality_r2_uses_first_model_as_target() {
    let a = spread(Variant::Sd, 6, 3, 3);
    let b = spread(Variant::Sd, 6, 3, 8);
    let rep = compare_universality(&a, &b).unwrap();
    let (ta, pb) = (&rep.profiles.d_a, &rep.profiles.d_b);
    let mean = ta.iter().sum::<f64>() / ta.len() as f64;
    let ss_res: f64 = ta.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
    let ss_tot: f64 = ta.iter().map(|x| (x - mean) * (x - mean)).sum();
    assert!((rep.r2_sorted_d - (1.0 - ss_res / ss_tot)).abs() < 1e-12);
}

#[test]
fn profile_helpers() {
    assert_eq!(normalize_profile(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    assert_eq!(normalize_profile(&[1.0, 1.0]), vec![0.0, 0.0]);
    assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_nan());
}

fn small_dataset() -> crate::datagen::Dataset {
    let p = FhnParams {
        n: 8,
        snapshots: 4,
        ..FhnParams::default()
    };
    gen_fitzhugh_nagumo(&p, 3, 1).unwrap()
}

#[test]
fn rollout_latent_energy_is_non_increasing() {
    let p = spread(Variant::Sd, 3, 3, 4);
    let ds = small_dataset();
    let rows = rollout_energy(&p, &ds, &ds.manifest.test, 200).unwrap();
    assert_eq!(rows.len(), 200);
    assert_eq!(rows[0].t, 1);
    for w in rows.windows(2) {
        assert!(w[1].latent_energy <= w[0].latent_energy + 1e-9);
    }
    assert!(rows[199].enstrophy.is_finite());
    assert!(rollout_energy(&p, &ds, &ds.manifest.test, 0).is_err());
}

#[test]
fn bench_counts_are_horizon_independent() {
    let p = spread(Variant::Sd, 3, 3, 6);
    let ds = small_dataset();
    let frames = ds.window(0, 0, p.config.t_in).unwrap();
    let rows = bench_time(&p, &frames, &[1.0, 10.0, 200.0]).unwrap();
    assert_eq!(rows.iter().map(|r| r.horizon).collect::<Vec<_>>(), vec![1.0, 10.0, 200.0]);
    assert!(rows.iter().all(|r| r.expm_calls == 9 && r.wall_ms >= 0.0));
}

#[test]
fn diagnostics_do_not_mutate_parameters() {
    let p = spread(Variant::Sd, 4, 3, 7);
    let q = spread(Variant::Sd, 4, 3, 9);
    let before = (p.checksum(), q.checksum());
    let ds = small_dataset();
    spectrum_report(&p).unwrap();
    fit_dissipation(&p).unwrap();
    compare_universality(&p, &q).unwrap();
    rollout_energy(&p, &ds, &[0], 3).unwrap();
    bench_time(&p, &ds.window(0, 0, 2).unwrap(), &[1.0]).unwrap();
    assert_eq!((p.checksum(), q.checksum()), before);
}

#[test]
fn empty_reports_render_header_only() {
    let empty = SpectrumReport::from_rows(Vec::new());
    assert_eq!(spectrum_csv(&empty), "kx,ky,ksq,re,im,branch\n");
    assert_eq!(energy_csv(&[]), "t,enstrophy,latent_energy\n");
    assert_eq!(bench_csv(&[]), "horizon,wall_ms,expm_calls\n");
    assert_eq!(parse_svg(&spectrum_svg(&empty)), 0);
    parse_svg(&energy_svg(&[]));
    parse_svg(&bench_svg(&[]));
}

#[test]
fn every_figure_is_well_formed() {
    let a = spread(Variant::Sd, 4, 3, 3);
    let b = spread(Variant::Sd, 4, 3, 8);
    let rep = spectrum_report(&a).unwrap();
    assert_eq!(parse_svg(&spectrum_svg(&rep)), rep.rows.len());
    parse_svg(&fit_svg(&fit_dissipation(&a).unwrap()));
    parse_svg(&profiles_svg(&compare_universality(&a, &b).unwrap()));
    let ds = small_dataset();
    parse_svg(&energy_svg(&rollout_energy(&a, &ds, &[0], 5).unwrap()));
    let bench = vec![BenchRow { horizon: 1.0, wall_ms: 0.5, expm_calls: 9 }, BenchRow { horizon: 200.0, wall_ms: 0.6, expm_calls: 9 }];
    parse_svg(&bench_svg(&bench));
}

#[test]
fn spectrum_csv_has_one_row_per_eigenvalue() {
    let p = spread(Variant::Sd, 3, 2, 1);
    let rep = spectrum_report(&p).unwrap();
    let csv = spectrum_csv(&rep);
    assert_eq!(csv.lines().count(), 1 + 12);
    let fit = fit_dissipation(&p).unwrap();
    let text = fit_csv(&fit);
    assert_eq!(text.lines().nth(1).unwrap().split(',').last(), Some("dominant"));
    assert_eq!(text.lines().count(), 2 + 3);
}

#[test]
fn render_writes_named_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = spread(Variant::Sd, 3, 2, 1);
    let files = render_spectrum(&spectrum_report(&p).unwrap(), dir.path()).unwrap();
    assert_eq!(files, vec![dir.path().join("spectrum.csv"), dir.path().join("spectrum.svg")]);
    assert!(files.iter().all(|f| f.exists()));
    let u = render_universality(&compare_universality(&p, &p).unwrap(), dir.path()).unwrap();
    assert_eq!(u.len(), 3);
}

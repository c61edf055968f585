use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use shapeflow::mesh::generate::{cylinder_hex_mesh, ellipsoid};
use shapeflow::mesh::io::{read_csv, read_json, write_json, write_obj};
use shapeflow::mesh::{CenterlineEncoding, FieldValues, HexHierarchy, NodalField, Units, Vec3};
use shapeflow::uq::BLOOD_VISCOSITY;
use shapeflow_cli::config::{LoadedConfig, PipelineConfig};
use shapeflow_cli::pipeline::write_if_changed;
use shapeflow_cli::toy::make_toy;
use shapeflow_cli::{cmd_analyze, cmd_extend, cmd_register, cmd_sample, cmd_train, CliError, SampleOverrides, Template};

/// Toy project in `dir` with single-threaded execution.
fn toy(dir: &Path, n_shapes: usize) -> LoadedConfig {
    let path = make_toy(dir, n_shapes, 3).unwrap();
    let mut c = PipelineConfig::from_toml(&fs::read_to_string(&path).unwrap()).unwrap();
    c.threads = Some(1);
    fs::write(&path, c.dump()).unwrap();
    PipelineConfig::load(&path).unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = fs::metadata(&p).unwrap();
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), (meta.modified().unwrap(), fs::read(&p).unwrap()));
            }
        }
    }
    out
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    read_csv(path).unwrap()
}

#[test]
fn zero_shapes_give_an_empty_similarity_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 0);
    assert!(cmd_register(&cfg, false).unwrap().is_empty());
    let out = cfg.config.paths.output.join("register");
    assert_eq!(fs::read_to_string(out.join("similarity.csv")).unwrap(), "shape\n");
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn missing_template_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 1);
    fs::remove_file(&cfg.config.paths.template).unwrap();
    let err = cmd_register(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn three_ellipsoids_register_and_reruns_are_no_ops() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 0);
    for (i, axes) in [(0.9, 1.0, 1.1), (1.2, 0.9, 1.0), (1.0, 1.1, 0.85)].into_iter().enumerate() {
        write_obj(cfg.config.paths.shapes.join(format!("e{i}.obj")), &ellipsoid(2, Vec3::new(axes.0, axes.1, axes.2))).unwrap();
    }
    let items = cmd_register(&cfg, false).unwrap();
    assert_eq!(items.len(), 3);
    let out = cfg.config.paths.output.join("register");
    for i in 0..3 {
        assert!(out.join(format!("flows/e{i}.timeflow.json")).is_file());
    }
    let (head, rows) = table(&out.join("similarity.csv"));
    assert_eq!(head, ["shape", "e0", "e1", "e2"]);
    let m: Vec<Vec<f64>> = rows.iter().map(|r| r[1..].iter().map(|v| v.parse().unwrap()).collect()).collect();
    for i in 0..3 {
        assert_eq!(m[i][i], 0.0);
        for j in 0..3 {
            assert_eq!(m[i][j], m[j][i]);
        }
    }
    assert!(m[0][1] > 0.0);

    let before = files(&cfg.config.paths.output);
    cmd_register(&cfg, false).unwrap();
    assert_eq!(files(&cfg.config.paths.output), before);
}

#[test]
fn unreadable_shapes_are_listed_and_fail_the_command() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 2);
    fs::write(cfg.config.paths.shapes.join("broken.obj"), "f 1 2 3\n").unwrap();
    let err = cmd_register(&cfg, false).unwrap_err();
    assert!(err.to_string().contains("broken"), "{err}");
    assert_eq!(err.exit_code(), 2);
    let out = cfg.config.paths.output.join("register");
    let (_, rows) = table(&out.join("registration.csv"));
    let status: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(status, [("box_00", "ok"), ("box_01", "ok"), ("broken", "failed")]);
    let (head, _) = table(&out.join("similarity.csv"));
    assert_eq!(head, ["shape", "box_00", "box_01"]);
}

fn trained(dir: &Path) -> LoadedConfig {
    let cfg = toy(dir, 3);
    cmd_register(&cfg, false).unwrap();
    cmd_train(&cfg, false).unwrap();
    cfg
}

#[test]
fn noiseless_single_trajectory_sampling_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let run = |seed| {
        let o = SampleOverrides { n_samples: Some(1), n_perturbations: Some(1), sigma: Some(0.0), gauss_amplitude: Some(0.0), alpha_r: Some(vec![1.0]), seed: Some(seed), ..Default::default() };
        cmd_sample(&cfg, &o, true).unwrap();
        fs::read(cfg.config.paths.output.join("sample/box_00/alpha_1/sample_0/surface.obj")).unwrap()
    };
    // With σ ≡ 0 and no perturbation the endpoint does not depend on the seed.
    let a = run(1);
    let b = run(2);
    assert_eq!(a, b);
}

#[test]
fn radius_factor_scales_the_written_condition() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let o = SampleOverrides { alpha_r: Some(vec![0.7]), gauss_amplitude: Some(0.0), n_perturbations: Some(1), n_samples: Some(2), ..Default::default() };
    cmd_sample(&cfg, &o, false).unwrap();
    let base: CenterlineEncoding = read_json(cfg.config.paths.shapes.join("box_01.centerline.json")).unwrap();
    let got: CenterlineEncoding = read_json(cfg.config.paths.output.join("sample/box_01/alpha_0.7/sample_0/condition.json")).unwrap();
    assert_eq!(got.points, base.points);
    let scaled: Vec<f64> = base.radii.iter().map(|r| r * 0.7).collect();
    assert_eq!(got.radii, scaled);
    let manifest = fs::read_to_string(cfg.config.paths.output.join("sample/manifest.json")).unwrap();
    assert!(manifest.contains("\"schedule\"") && manifest.contains("\"sde_seed\"") && manifest.contains("\"condition\""));
}

#[test]
fn same_seed_gives_byte_identical_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let o = SampleOverrides { n_perturbations: Some(1), ..Default::default() };
    cmd_sample(&cfg, &o, false).unwrap();
    let first = files(&cfg.config.paths.output.join("sample"));
    cmd_sample(&cfg, &o, true).unwrap();
    let second = files(&cfg.config.paths.output.join("sample"));
    let bytes = |m: &BTreeMap<PathBuf, (SystemTime, Vec<u8>)>| m.iter().map(|(k, v)| (k.clone(), v.1.clone())).collect::<Vec<_>>();
    assert_eq!(bytes(&first), bytes(&second));
    // Forced rewrites of identical bytes leave the files untouched.
    assert_eq!(first, second);
}

/// Writes a fake sample stage with the given boundary displacements.
fn fake_samples(cfg: &LoadedConfig, disps: &[Vec<Vec3>]) {
    let template = Template::load(&cfg.config.paths.template).unwrap();
    let dir = cfg.config.paths.output.join("sample");
    let mut csv = String::from("batch,alpha_r,sample,path,field_seed,sde_seed\n");
    for (k, d) in disps.iter().enumerate() {
        let rel = format!("b/alpha_1/sample_{k}");
        fs::create_dir_all(dir.join(&rel)).unwrap();
        let f = NodalField::on_surface(&template.surface, Units::Millimeter, FieldValues::Vector(d.clone())).unwrap();
        write_json(dir.join(&rel).join("displacement.json"), &f).unwrap();
        csv.push_str(&format!("b,1,{k},{rel},0,0\n"));
    }
    write_if_changed(&dir.join("samples.csv"), csv.as_bytes()).unwrap();
}

fn pinch(template: &Template) -> Vec<Vec3> {
    template.surface.vertices.iter().map(|p| if p.z > 0.99 { Vec3::new(0.0, 0.0, -2.5) } else { Vec3::zeros() }).collect()
}

#[test]
fn identity_extension_needs_no_smoothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 0);
    let template = Template::load(&cfg.config.paths.template).unwrap();
    fake_samples(&cfg, &[vec![Vec3::zeros(); template.boundary.len()]]);
    let st = cmd_extend(&cfg, false).unwrap();
    assert_eq!(st.len(), 1);
    assert_eq!((st[0].status.as_str(), st[0].smoothing_iterations), ("ok", 0));
    assert_eq!(st[0].max_aspect, Some(1.0));
    let h: HexHierarchy = read_json(cfg.config.paths.output.join("extend/b/alpha_1/sample_0/hierarchy.json")).unwrap();
    assert_eq!(h, template.hierarchy);
}

#[test]
fn pinched_geometry_is_excluded_without_failing_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 0);
    let template = Template::load(&cfg.config.paths.template).unwrap();
    let mut disps: Vec<Vec<Vec3>> = (0..10)
        .map(|k| template.surface.vertices.iter().map(|p| 0.01 * k as f64 * Vec3::new(p.x, 0.0, 0.0)).collect())
        .collect();
    disps[4] = pinch(&template);
    fake_samples(&cfg, &disps);
    let st = cmd_extend(&cfg, false).unwrap();
    let ok = st.iter().filter(|s| s.status == "ok").count();
    assert_eq!(ok, 9);
    assert_eq!(st[4].status, "excluded");
    assert_eq!(st[4].reason.as_deref(), Some("inverted cells"));
    let (_, rows) = table(&cfg.config.paths.output.join("extend/quality.csv"));
    assert_eq!(rows[4][4..6], ["excluded".to_string(), "inverted cells".to_string()]);
    assert!(!cfg.config.paths.output.join("extend/b/alpha_1/sample_4/hierarchy.json").exists());
    let manifest = fs::read_to_string(cfg.config.paths.output.join("extend/manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"excluded\"").count(), 1);

    // The analysis keeps the bookkeeping.
    cmd_analyze(&cfg, false).unwrap();
    let (head, rows) = table(&cfg.config.paths.output.join("analyze/qoi_summary.csv"));
    assert_eq!(head[..4], ["batch", "alpha_r", "n_valid", "n_excluded"]);
    assert_eq!(rows[0][2..4], ["9".to_string(), "1".to_string()]);
}

/// An analysis input with `n` copies of one hierarchy and per-copy fields.
fn analysis_input(dir: &Path, h: &HexHierarchy, n: usize, fields: impl Fn(usize, &Path)) {
    let mut csv = String::from("batch,alpha_r,sample,path,status,reason,max_aspect,smoothing_iterations\n");
    for k in 0..n {
        let rel = format!("b/alpha_1/sample_{k}");
        let g = dir.join(&rel);
        fs::create_dir_all(&g).unwrap();
        write_json(g.join("hierarchy.json"), h).unwrap();
        fields(k, &g);
        csv.push_str(&format!("b,1,{k},{rel},ok,,1,0\n"));
    }
    fs::write(dir.join("quality.csv"), csv).unwrap();
}

fn summary_value(path: &Path, col: &str) -> Vec<String> {
    let (head, rows) = table(path);
    let c = head.iter().position(|h| h == col).unwrap_or_else(|| panic!("no column {col} in {head:?}"));
    rows.iter().map(|r| r[c].clone()).collect()
}

#[test]
fn constant_fields_have_zero_spread_and_identical_sets_zero_distance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy(tmp.path(), 0);
    let h = shapeflow_cli::toy::toy_template();
    let input = tmp.path().join("fields");
    analysis_input(&input, &h, 3, |_, g| {
        let p = NodalField::on_hex(h.finest(), Units::Pascal, FieldValues::Scalar(vec![4.25; h.finest().vertices.len()])).unwrap();
        write_json(g.join("pressure.json"), &p).unwrap();
    });
    cfg.config.analysis.input = Some(input);
    cmd_analyze(&cfg, false).unwrap();
    let summary = cfg.config.paths.output.join("analyze/qoi_summary.csv");
    assert_eq!(summary_value(&summary, "mean_pressure_mean"), ["4.25"]);
    assert_eq!(summary_value(&summary, "mean_pressure_std"), ["0"]);
    assert_eq!(summary_value(&summary, "mean_pressure_n"), ["3"]);
    let stats = cfg.config.paths.output.join("analyze/batch_stats.csv");
    assert_eq!(summary_value(&stats, "vertex_std"), ["0"]);

    let mut other = cfg.clone();
    other.config.paths.output = tmp.path().join("out2");
    other.config.analysis.reference = Some(cfg.config.paths.output.join("analyze"));
    cmd_analyze(&other, false).unwrap();
    let w1 = summary_value(&other.config.paths.output.join("analyze/w1.csv"), "w1");
    assert_eq!(w1.len(), 4);
    assert!(w1.iter().all(|w| w == "0"), "{w1:?}");
}

#[test]
fn poiseuille_batch_matches_the_analytic_wall_shear_stress() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = toy(tmp.path(), 0);
    let (r, u_max) = (1.0, 0.8);
    let h = HexHierarchy::from_base(cylinder_hex_mesh(r, 2.0, 32, 4), 1);
    let input = tmp.path().join("fields");
    analysis_input(&input, &h, 2, |_, g| {
        let mesh = h.finest();
        let u = mesh.vertices.iter().map(|p| Vec3::new(0.0, 0.0, u_max * (1.0 - (p.x * p.x + p.y * p.y) / (r * r)))).collect();
        let u = NodalField::on_hex(mesh, Units::MetersPerSecond, FieldValues::Vector(u)).unwrap();
        write_json(g.join("velocity.json"), &u).unwrap();
    });
    cfg.config.analysis.input = Some(input);
    cmd_analyze(&cfg, false).unwrap();
    let wss: f64 = summary_value(&cfg.config.paths.output.join("analyze/qoi_summary.csv"), "wss_mean_mean")[0].parse().unwrap();
    let exact = 2.0 * BLOOD_VISCOSITY * u_max / r;
    assert!(((wss - exact) / exact).abs() < 0.02, "{wss} vs {exact}");
}

#[test]
fn analyze_without_inputs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy(tmp.path(), 0);
    assert_eq!(cmd_analyze(&cfg, false).unwrap_err().exit_code(), 2);
}

//! Stage commands. Each stage reads the previous stage's output under the
//! output root, writes its own directory and a `manifest.json`, and skips
//! work whose outputs already exist unless forced. Files are only rewritten
//! when their bytes change, so an up-to-date rerun touches nothing.
//!
//! Output layout (relative to `paths.output`):
//!
//! * `register/flows/<shape>.timeflow.json`, `<shape>.report.json`,
//!   `register/similarity.csv` (`shape,<shape>...`) and
//!   `register/registration.csv`
//!   (`shape,status,initial_chamfer,final_chamfer,final_chamfer_rms,max_round_trip,min_step_det,reason`).
//! * `train/driftnet.json`, `train/loss.csv` (`epoch,loss`); `finetune/` alike.
//! * `sample/<batch>/alpha_<α>/sample_<k>/{surface.obj,displacement.json,condition.json}`
//!   and `sample/samples.csv` (`batch,alpha_r,sample,path,field_seed,sde_seed`).
//! * `extend/<path>/{hierarchy.json,status.json}` and `extend/quality.csv`
//!   (`batch,alpha_r,sample,path,status,reason,max_aspect,smoothing_iterations`).
//! * `analyze/qoi_samples.csv` (`batch,alpha_r,sample,qoi,value`),
//!   `analyze/qoi_summary.csv` (`batch,alpha_r,n_valid,n_excluded`, then
//!   `<qoi>_mean,<qoi>_std,<qoi>_n` per QoI), `analyze/batch_stats.csv`
//!   (`batch,alpha_r,n_shapes,mean_chamfer,mean_chamfer_squared,vertex_std`)
//!   and, with a reference, `analyze/w1.csv`
//!   (`batch,alpha_r,qoi,n,n_reference,w1`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapeflow::interpolant::{finetune, perturb_condition, sample, train, DriftNet, GaussianField, SampleConfig, SigmaSchedule, TrainingPair};
use shapeflow::mesh::hex::{aspect_ratio_unsigned, detect_inverted_cells, trilinear_jacobian, SampleSet};
use shapeflow::mesh::io::{from_json_str, obj_to_string, read_csv, read_json, read_obj, to_json_string, Document};
use shapeflow::mesh::section::{Domain, HexLocator};
use shapeflow::mesh::{cross_section, CenterlineEncoding, FieldValues, HexHierarchy, HexMesh, NodalField, SurfaceMesh, Units, Vec3};
use shapeflow::registration::{chamfer_rms, register_points, similarity_matrix, TimeFlow};
use shapeflow::transport::{extend_displacement, propagate_hierarchy};
use shapeflow::uq::{batch_shape_stats, flagged_mean, monte_carlo_estimate, nfd, section_flux, sfd, volume_mean, wall_points, wall_shear_stress, wasserstein1};
use shapeflow::Error;

use crate::config::{Checkpoint, LoadedConfig};
use crate::{list_files, with_threads, write_manifest, CliError, CliResult, Template};

/// Outcome of one item of a batch stage, as recorded in its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemStatus {
    pub name: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Writes `bytes` unless the file already holds exactly them.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> CliResult<bool> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(true)
}

fn write_doc<T: Document>(path: &Path, doc: &T) -> CliResult<()> {
    write_if_changed(path, to_json_string(doc)?.as_bytes())?;
    Ok(())
}

fn write_plain<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(v).expect("record serializes");
    s.push('\n');
    write_if_changed(path, s.as_bytes())?;
    Ok(())
}

fn read_plain<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Failed(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failed(format!("csv: {e}")))?;
    write_if_changed(path, &bytes)?;
    Ok(())
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Shortest round-trip decimal; empty for undefined values.
fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn all_exist(paths: &[PathBuf]) -> bool {
    paths.iter().all(|p| p.is_file())
}

/// SplitMix64 over `base` and `parts`; independent streams per job.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |h, &p| mix(h ^ mix(p)))
}

/// Stable 64-bit key of a name.
pub fn name_key(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn stage(cfg: &LoadedConfig, name: &str) -> PathBuf {
    cfg.config.paths.output.join(name)
}

fn prepare(cfg: &LoadedConfig) -> CliResult<Template> {
    cfg.config.validate()?;
    cfg.config.require_template()?;
    Template::load(&cfg.config.paths.template)
}

// ---------------------------------------------------------------- register

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RegistrationReport {
    initial_chamfer: f64,
    final_chamfer: f64,
    final_chamfer_rms: f64,
    max_round_trip: f64,
    min_step_det: f64,
}

/// Registers every `<shape>.obj` of the shapes directory to the template
/// surface. Failed shapes are listed in the outputs, and the command then
/// returns an error.
pub fn cmd_register(cfg: &LoadedConfig, force: bool) -> CliResult<Vec<ItemStatus>> {
    let template = prepare(cfg)?;
    cfg.config.require_shapes()?;
    with_threads(cfg.config.threads, || register_inner(cfg, &template, force))?
}

fn register_inner(cfg: &LoadedConfig, template: &Template, force: bool) -> CliResult<Vec<ItemStatus>> {
    let c = &cfg.config;
    let dir = stage(cfg, "register");
    let flows_dir = dir.join("flows");
    fs::create_dir_all(&flows_dir)?;
    let points = &template.surface.vertices;
    let shapes = list_files(&c.paths.shapes, ".obj")?;
    let results: Vec<Result<(TimeFlow, RegistrationReport), String>> = shapes
        .par_iter()
        .map(|(stem, path)| {
            let flow_path = flows_dir.join(format!("{stem}.timeflow.json"));
            let report_path = flows_dir.join(format!("{stem}.report.json"));
            let run = || -> CliResult<(TimeFlow, RegistrationReport)> {
                if !force && all_exist(&[flow_path.clone(), report_path.clone()]) {
                    return Ok((read_json(&flow_path)?, read_plain(&report_path)?));
                }
                let target = read_obj(path)?;
                let res = register_points(points, &target.vertices, &c.registration)?;
                let rms = chamfer_rms(&res.flow.forward(points, 1.0), &target.vertices)?;
                let report = RegistrationReport {
                    initial_chamfer: res.initial_chamfer,
                    final_chamfer: res.final_chamfer,
                    final_chamfer_rms: rms,
                    max_round_trip: res.invertibility.max_round_trip,
                    min_step_det: res.invertibility.min_step_det,
                };
                write_doc(&flow_path, &res.flow)?;
                write_plain(&report_path, &report)?;
                Ok((res.flow, report))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut items = Vec::new();
    let mut rows = Vec::new();
    let (mut names, mut flows) = (Vec::new(), Vec::new());
    for ((stem, _), r) in shapes.iter().zip(results) {
        match r {
            Ok((flow, rep)) => {
                rows.push(vec![
                    stem.clone(),
                    "ok".into(),
                    num(Some(rep.initial_chamfer)),
                    num(Some(rep.final_chamfer)),
                    num(Some(rep.final_chamfer_rms)),
                    num(Some(rep.max_round_trip)),
                    num(Some(rep.min_step_det)),
                    String::new(),
                ]);
                items.push(ItemStatus { name: stem.clone(), status: "ok".into(), reason: None });
                names.push(stem.clone());
                flows.push(flow);
            }
            Err(reason) => {
                rows.push(vec![stem.clone(), "failed".into(), String::new(), String::new(), String::new(), String::new(), String::new(), reason.clone()]);
                items.push(ItemStatus { name: stem.clone(), status: "failed".into(), reason: Some(reason) });
            }
        }
    }
    let matrix = match flows.len() {
        0 => Vec::new(),
        1 => vec![vec![0.0]],
        _ => similarity_matrix(&flows, points)?,
    };
    let mut sim_header = vec!["shape".to_string()];
    sim_header.extend(names.iter().cloned());
    let sim_rows: Vec<Vec<String>> = names
        .iter()
        .zip(&matrix)
        .map(|(n, row)| std::iter::once(n.clone()).chain(row.iter().map(|&v| num(Some(v)))).collect())
        .collect();
    write_table(&dir.join("similarity.csv"), &sim_header, &sim_rows)?;
    write_table(
        &dir.join("registration.csv"),
        &header(&["shape", "status", "initial_chamfer", "final_chamfer", "final_chamfer_rms", "max_round_trip", "min_step_det", "reason"]),
        &rows,
    )?;
    write_manifest(&dir, "register", cfg, &items)?;
    let failed: Vec<&str> = items.iter().filter(|i| i.status != "ok").map(|i| i.name.as_str()).collect();
    if failed.is_empty() {
        Ok(items)
    } else {
        Err(CliError::Failed(format!("registration failed for: {}", failed.join(", "))))
    }
}

// ------------------------------------------------------------ train/finetune

fn load_pairs(cfg: &LoadedConfig) -> CliResult<(Vec<String>, Vec<TrainingPair>)> {
    let flows_dir = stage(cfg, "register").join("flows");
    if !flows_dir.is_dir() {
        return Err(CliError::Failed(format!("{} does not exist; run register first", flows_dir.display())));
    }
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for (stem, path) in list_files(&flows_dir, ".timeflow.json")? {
        let cond_path = cfg.config.paths.shapes.join(format!("{stem}.centerline.json"));
        if !cond_path.is_file() {
            return Err(CliError::Config(format!("missing condition {}", cond_path.display())));
        }
        pairs.push(TrainingPair { flow: read_json(&path)?, condition: read_json(&cond_path)? });
        names.push(stem);
    }
    if pairs.is_empty() {
        return Err(CliError::Failed("no registration flows to train on".into()));
    }
    Ok((names, pairs))
}

fn write_loss(dir: &Path, losses: &[f64]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = losses.iter().enumerate().map(|(e, &l)| vec![e.to_string(), num(Some(l))]).collect();
    write_table(&dir.join("loss.csv"), &header(&["epoch", "loss"]), &rows)
}

fn write_pair_manifest(dir: &Path, command: &str, cfg: &LoadedConfig, names: &[String]) -> CliResult<()> {
    let items: Vec<ItemStatus> = names.iter().map(|n| ItemStatus { name: n.clone(), status: "ok".into(), reason: None }).collect();
    write_manifest(dir, command, cfg, &items)
}

/// Fits the drift network to the registration flows paired with their
/// `<shape>.centerline.json` conditions.
pub fn cmd_train(cfg: &LoadedConfig, force: bool) -> CliResult<()> {
    let template = prepare(cfg)?;
    with_threads(cfg.config.threads, || {
        let dir = stage(cfg, "train");
        let (names, pairs) = load_pairs(cfg)?;
        let (net_path, loss_path) = (dir.join("driftnet.json"), dir.join("loss.csv"));
        if force || !all_exist(&[net_path.clone(), loss_path]) {
            let points = &template.surface.vertices;
            let net = DriftNet::new(cfg.config.drift.clone(), points)?;
            let (net, losses) = train(net, &pairs, points, &cfg.config.training)?;
            fs::create_dir_all(&dir)?;
            write_doc(&net_path, &net)?;
            write_loss(&dir, &losses)?;
        }
        write_pair_manifest(&dir, "train", cfg, &names)
    })?
}

/// Continues training from the `train` checkpoint at the decayed rate.
pub fn cmd_finetune(cfg: &LoadedConfig, force: bool) -> CliResult<()> {
    let template = prepare(cfg)?;
    with_threads(cfg.config.threads, || {
        let dir = stage(cfg, "finetune");
        let src = stage(cfg, "train").join("driftnet.json");
        if !src.is_file() {
            return Err(CliError::Failed(format!("{} does not exist; run train first", src.display())));
        }
        let (names, pairs) = load_pairs(cfg)?;
        let (net_path, loss_path) = (dir.join("driftnet.json"), dir.join("loss.csv"));
        if force || !all_exist(&[net_path.clone(), loss_path]) {
            let net: DriftNet = read_json(&src)?;
            let (net, losses) = finetune(net, &pairs, &template.surface.vertices, &cfg.config.training)?;
            fs::create_dir_all(&dir)?;
            write_doc(&net_path, &net)?;
            write_loss(&dir, &losses)?;
        }
        write_pair_manifest(&dir, "finetune", cfg, &names)
    })?
}

// ------------------------------------------------------------------ sample

/// Command-line overrides of the sampling section.
#[derive(Clone, Debug, Default)]
pub struct SampleOverrides {
    pub alpha_r: Option<Vec<f64>>,
    pub gauss_amplitude: Option<f64>,
    pub n_samples: Option<usize>,
    pub n_perturbations: Option<usize>,
    pub time_steps: Option<usize>,
    pub seed: Option<u64>,
    /// Constant diffusion coefficient.
    pub sigma: Option<f64>,
}

impl SampleOverrides {
    pub fn apply(&self, cfg: &LoadedConfig) -> LoadedConfig {
        let mut out = cfg.clone();
        let s = &mut out.config.sampling;
        if let Some(a) = &self.alpha_r {
            s.alpha_r = a.clone();
        }
        if let Some(a) = self.gauss_amplitude {
            s.gauss_amplitude = a;
        }
        if let Some(n) = self.n_samples {
            s.n_samples = n;
        }
        if let Some(n) = self.n_perturbations {
            s.n_perturbations = n;
        }
        if let Some(n) = self.time_steps {
            s.time_steps = n;
        }
        if let Some(sigma) = self.sigma {
            s.schedule = Some(SigmaSchedule::constant(sigma));
        }
        if let Some(seed) = self.seed {
            out.config.seed = seed;
            out.config.apply_seed();
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleItem {
    batch: String,
    alpha_r: f64,
    sample: usize,
    path: String,
    field_seed: u64,
    sde_seed: u64,
    n_samples: usize,
    time_steps: usize,
    schedule: SigmaSchedule,
    condition: CenterlineEncoding,
}

fn alpha_dir(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

/// Generates geometries for every base condition, radius factor and
/// perturbation: the condition is perturbed by one Gaussian-field draw,
/// then `n_samples` SDE trajectories from the template are averaged.
pub fn cmd_sample(cfg: &LoadedConfig, overrides: &SampleOverrides, force: bool) -> CliResult<()> {
    let cfg = &overrides.apply(cfg);
    let template = prepare(cfg)?;
    with_threads(cfg.config.threads, || sample_inner(cfg, &template, force))?
}

fn sample_inner(cfg: &LoadedConfig, template: &Template, force: bool) -> CliResult<()> {
    let c = &cfg.config;
    let s = &c.sampling;
    let ckpt = stage(cfg, match s.checkpoint {
        Checkpoint::Train => "train",
        Checkpoint::Finetune => "finetune",
    })
    .join("driftnet.json");
    if !ckpt.is_file() {
        return Err(CliError::Failed(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let net: DriftNet = read_json(&ckpt)?;
    let cond_dir = s.conditions.clone().unwrap_or_else(|| c.paths.shapes.clone());
    if !cond_dir.is_dir() {
        return Err(CliError::Config(format!("conditions directory {} does not exist", cond_dir.display())));
    }
    let bases = list_files(&cond_dir, ".centerline.json")?;
    let schedule = c.sampling_schedule();
    let dir = stage(cfg, "sample");
    let mut jobs = Vec::new();
    for (b, (stem, path)) in bases.iter().enumerate() {
        for &alpha in &s.alpha_r {
            for k in 0..s.n_perturbations {
                jobs.push((b, stem.clone(), path.clone(), alpha, k));
            }
        }
    }
    let points = &template.surface.vertices;
    let items: Vec<SampleItem> = jobs
        .par_iter()
        .map(|(_, stem, path, alpha, k)| -> CliResult<SampleItem> {
            let rel = format!("{stem}/{}/sample_{k}", alpha_dir(*alpha));
            let out = dir.join(&rel);
            let key = [name_key(stem), alpha.to_bits(), *k as u64];
            let field_seed = derive_seed(c.seed, &[&key[..], &[0]].concat());
            let sde_seed = derive_seed(c.seed, &[&key[..], &[1]].concat());
            let files = [out.join("surface.obj"), out.join("displacement.json"), out.join("condition.json")];
            let condition = if !force && all_exist(&files) {
                read_json(&files[2])?
            } else {
                let base: CenterlineEncoding = read_json(path)?;
                let field = GaussianField { length_scale: s.gauss_length_scale, amplitude: s.gauss_amplitude, seed: field_seed };
                let cond = perturb_condition(&base, *alpha, &field)?;
                let mut sc = SampleConfig::new(s.n_samples, s.time_steps, schedule, sde_seed);
                sc.noise = s.noise;
                let gen = sample(&net, points, &cond, &sc)?;
                let surface = SurfaceMesh { vertices: gen.mean.clone(), ..template.surface.clone() };
                let disp: Vec<Vec3> = gen.mean.iter().zip(points).map(|(a, b)| a - b).collect();
                let field = NodalField::on_surface(&template.surface, Units::Millimeter, FieldValues::Vector(disp))?;
                fs::create_dir_all(&out)?;
                write_if_changed(&files[0], obj_to_string(&surface).as_bytes())?;
                write_doc(&files[1], &field)?;
                write_doc(&files[2], &cond)?;
                cond
            };
            Ok(SampleItem {
                batch: stem.clone(),
                alpha_r: *alpha,
                sample: *k,
                path: rel,
                field_seed,
                sde_seed,
                n_samples: s.n_samples,
                time_steps: s.time_steps,
                schedule,
                condition,
            })
        })
        .collect::<CliResult<_>>()?;
    fs::create_dir_all(&dir)?;
    let rows: Vec<Vec<String>> = items
        .iter()
        .map(|i| vec![i.batch.clone(), num(Some(i.alpha_r)), i.sample.to_string(), i.path.clone(), i.field_seed.to_string(), i.sde_seed.to_string()])
        .collect();
    write_table(&dir.join("samples.csv"), &header(&["batch", "alpha_r", "sample", "path", "field_seed", "sde_seed"]), &rows)?;
    write_manifest(&dir, "sample", cfg, &items)
}

// ------------------------------------------------------------------ extend

/// Per-geometry result of volume extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStatus {
    pub batch: String,
    pub alpha_r: String,
    pub sample: String,
    pub path: String,
    /// `ok` or `excluded`.
    pub status: String,
    pub reason: Option<String>,
    pub max_aspect: Option<f64>,
    pub smoothing_iterations: usize,
}

/// Column lookup in a CSV header.
fn column(head: &[String], name: &str, file: &Path) -> CliResult<usize> {
    head.iter().position(|h| h == name).ok_or_else(|| CliError::Failed(format!("{} has no column {name}", file.display())))
}

fn max_aspect(mesh: &HexMesh) -> f64 {
    let s = SampleSet::default();
    (0..mesh.cells.len()).map(|c| aspect_ratio_unsigned(&mesh.cell_vertices(c), &s, f64::INFINITY)).fold(1.0, f64::max)
}

fn extend_one(cfg: &LoadedConfig, template: &Template, disp_path: &Path) -> CliResult<Result<(HexHierarchy, f64, usize), String>> {
    let t = &cfg.config.transport;
    let field: NodalField = read_json(disp_path)?;
    let FieldValues::Vector(d) = field.values else {
        return Ok(Err("displacement is not a vector field".into()));
    };
    if d.len() != template.boundary.len() {
        return Ok(Err(format!("displacement has {} vectors for {} boundary vertices", d.len(), template.boundary.len())));
    }
    let inverted = |e: &Error| matches!(e, Error::InvalidVolumeMesh(_) | Error::InvertedCell { .. });
    let ext = match extend_displacement(&template.hierarchy, &d, &t.elastic) {
        Ok(e) => e,
        Err(e) if inverted(&e) => return Ok(Err("inverted cells".into())),
        Err(e) => return Ok(Err(e.to_string())),
    };
    let prop = match propagate_hierarchy(&template.hierarchy, &ext.displacement, t.smooth.then_some(&t.smoothing)) {
        Ok(p) => p,
        Err(e) if inverted(&e) => return Ok(Err("inverted cells".into())),
        Err(e) => return Ok(Err(e.to_string())),
    };
    let fine = prop.hierarchy.finest();
    if !detect_inverted_cells(fine, &SampleSet::default()).is_empty() {
        return Ok(Err("inverted cells".into()));
    }
    let iterations = prop.traces.iter().filter_map(|tr| tr.last()).map(|r| r.iteration).sum();
    let aspect = max_aspect(fine);
    Ok(Ok((prop.hierarchy, aspect, iterations)))
}

/// Extends every generated surface displacement into the template volume
/// and smooths it. Geometries that cannot be meshed are excluded and
/// recorded, not fatal.
pub fn cmd_extend(cfg: &LoadedConfig, force: bool) -> CliResult<Vec<GeometryStatus>> {
    let template = prepare(cfg)?;
    with_threads(cfg.config.threads, || extend_inner(cfg, &template, force))?
}

fn extend_inner(cfg: &LoadedConfig, template: &Template, force: bool) -> CliResult<Vec<GeometryStatus>> {
    let samples_dir = stage(cfg, "sample");
    let table = samples_dir.join("samples.csv");
    if !table.is_file() {
        return Err(CliError::Failed(format!("{} does not exist; run sample first", table.display())));
    }
    let (head, rows) = read_csv(&table)?;
    let col = |n| column(&head, n, &table);
    let (cb, ca, cs, cp) = (col("batch")?, col("alpha_r")?, col("sample")?, col("path")?);
    let dir = stage(cfg, "extend");
    let statuses: Vec<GeometryStatus> = rows
        .par_iter()
        .map(|r| -> CliResult<GeometryStatus> {
            let out = dir.join(&r[cp]);
            let status_path = out.join("status.json");
            if !force && status_path.is_file() {
                return read_plain(&status_path);
            }
            let mut st = GeometryStatus {
                batch: r[cb].clone(),
                alpha_r: r[ca].clone(),
                sample: r[cs].clone(),
                path: r[cp].clone(),
                status: "excluded".into(),
                reason: None,
                max_aspect: None,
                smoothing_iterations: 0,
            };
            fs::create_dir_all(&out)?;
            match extend_one(cfg, template, &samples_dir.join(&r[cp]).join("displacement.json"))? {
                Ok((h, aspect, iterations)) => {
                    write_doc(&out.join("hierarchy.json"), &h)?;
                    st.status = "ok".into();
                    st.max_aspect = Some(aspect);
                    st.smoothing_iterations = iterations;
                }
                Err(reason) => {
                    let _ = fs::remove_file(out.join("hierarchy.json"));
                    st.reason = Some(reason);
                }
            }
            write_plain(&status_path, &st)?;
            Ok(st)
        })
        .collect::<CliResult<_>>()?;
    fs::create_dir_all(&dir)?;
    let rows: Vec<Vec<String>> = statuses
        .iter()
        .map(|s| {
            vec![
                s.batch.clone(),
                s.alpha_r.clone(),
                s.sample.clone(),
                s.path.clone(),
                s.status.clone(),
                s.reason.clone().unwrap_or_default(),
                num(s.max_aspect),
                s.smoothing_iterations.to_string(),
            ]
        })
        .collect();
    write_table(
        &dir.join("quality.csv"),
        &header(&["batch", "alpha_r", "sample", "path", "status", "reason", "max_aspect", "smoothing_iterations"]),
        &rows,
    )?;
    write_manifest(&dir, "extend", cfg, &statuses)?;
    Ok(statuses)
}

// ----------------------------------------------------------------- analyze

/// Volume of a hex mesh with 2×2×2 Gauss quadrature of `|det J|`.
pub fn hex_volume(mesh: &HexMesh) -> f64 {
    const G: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];
    let mut vol = 0.0;
    for c in 0..mesh.cells.len() {
        let x = mesh.cell_vertices(c);
        for a in G {
            for b in G {
                for g in G {
                    vol += trilinear_jacobian(&x, &Vec3::new(a, b, g)).determinant().abs() / 8.0;
                }
            }
        }
    }
    vol
}

fn geometry_qois(cfg: &LoadedConfig, dir: &Path, mesh: &HexMesh) -> CliResult<Vec<(String, Option<f64>)>> {
    let a = &cfg.config.analysis;
    let surf = mesh.boundary_surface();
    let wall_area = (0..surf.triangles.len()).filter(|&t| a.wall_patches.contains(&surf.patches[t])).map(|t| surf.triangle_area(t)).sum();
    let mut q = vec![
        ("volume".to_string(), Some(hex_volume(mesh))),
        ("wall_area".to_string(), Some(wall_area)),
        ("max_aspect".to_string(), Some(max_aspect(mesh))),
    ];
    let domain = Domain::hex(mesh);
    let velocity_path = dir.join("velocity.json");
    if velocity_path.is_file() {
        let u: NodalField = read_json(&velocity_path)?;
        let wall = wall_points(mesh, &a.wall_patches);
        let wss = wall_shear_stress(mesh, &HexLocator::new(mesh), &u, &wall, a.viscosity, None)?;
        q.push(("wss_mean".into(), flagged_mean(&wss.magnitudes()).mean));
        for sec in &a.sections {
            let cut = cross_section(&domain, &u, &sec.point, &sec.normal, sec.polar_grid).ok();
            let sf = cut.as_ref().and_then(|s| sfd(s).ok().flatten());
            let nf = cut.as_ref().and_then(|s| nfd(s).ok().flatten());
            let flux = cut.as_ref().and_then(|s| section_flux(s).ok());
            q.push((format!("sfd_{}", sec.name), sf));
            q.push((format!("nfd_{}", sec.name), nf));
            q.push((format!("flux_{}", sec.name), flux));
        }
    }
    let pressure_path = dir.join("pressure.json");
    if pressure_path.is_file() {
        let p: NodalField = read_json(&pressure_path)?;
        let FieldValues::Scalar(values) = &p.values else {
            return Err(CliError::Failed(format!("{} is not a scalar field", pressure_path.display())));
        };
        if values.len() != mesh.vertices.len() {
            return Err(CliError::Failed(format!("{} does not match the mesh", pressure_path.display())));
        }
        q.push(("mean_pressure".into(), Some(volume_mean(mesh, values))));
        if let (Some(i), Some(d)) = (&a.inlet, &a.descending) {
            let find = |n: &str| a.sections.iter().find(|s| s.name == n).ok_or_else(|| CliError::Config(format!("unknown section {n}")));
            let mean = |n: &str| -> CliResult<Option<f64>> {
                let s = find(n)?;
                Ok(cross_section(&domain, &p, &s.point, &s.normal, s.polar_grid).ok().and_then(|c| c.mean_scalar()))
            };
            let drop = match (mean(d)?, mean(i)?) {
                (Some(pd), Some(pi)) => Some(pd - pi),
                _ => None,
            };
            q.push(("pressure_drop".into(), drop));
        }
    }
    Ok(q)
}

type BatchKey = (String, String);

fn batch_order(a: &BatchKey, b: &BatchKey) -> std::cmp::Ordering {
    let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
    a.0.cmp(&b.0).then(f(&a.1).total_cmp(&f(&b.1))).then(a.1.cmp(&b.1))
}

/// QoI values by `(batch, α_r)` and QoI name, from a `qoi_samples.csv`.
fn read_qoi_samples(path: &Path) -> CliResult<BTreeMap<(String, String, String), Vec<f64>>> {
    let (head, rows) = read_csv(path)?;
    let col = |n| column(&head, n, path);
    let (cb, ca, cq, cv) = (col("batch")?, col("alpha_r")?, col("qoi")?, col("value")?);
    let mut out: BTreeMap<_, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let e = out.entry((r[cb].clone(), r[ca].clone(), r[cq].clone())).or_default();
        if !r[cv].is_empty() {
            e.push(r[cv].parse().map_err(|_| CliError::Failed(format!("{}: bad value {}", path.display(), r[cv])))?);
        }
    }
    Ok(out)
}

/// Geometric and hemodynamic QoIs per valid geometry, Monte Carlo
/// summaries per `(batch, α_r)`, shape-variability statistics and, against
/// `analysis.reference`, per-QoI W₁ distances.
///
/// Each geometry directory of the input may hold `velocity.json` (vector)
/// and `pressure.json` (scalar) nodal fields on its finest level.
pub fn cmd_analyze(cfg: &LoadedConfig, force: bool) -> CliResult<()> {
    cfg.config.validate()?;
    with_threads(cfg.config.threads, || analyze_inner(cfg, force))?
}

fn analyze_inner(cfg: &LoadedConfig, force: bool) -> CliResult<()> {
    let a = &cfg.config.analysis;
    let input = a.input.clone().unwrap_or_else(|| stage(cfg, "extend"));
    let table = input.join("quality.csv");
    if !table.is_file() {
        return Err(CliError::Failed(format!("no inputs: {} does not exist", table.display())));
    }
    let dir = stage(cfg, "analyze");
    let mut outputs = vec![dir.join("qoi_samples.csv"), dir.join("qoi_summary.csv"), dir.join("batch_stats.csv"), dir.join("manifest.json")];
    if a.reference.is_some() {
        outputs.push(dir.join("w1.csv"));
    }
    if !force && all_exist(&outputs) {
        return Ok(());
    }
    let (head, rows) = read_csv(&table)?;
    if rows.is_empty() {
        return Err(CliError::Failed(format!("no inputs: {} is empty", table.display())));
    }
    let col = |n| column(&head, n, &table);
    let (cb, ca, cs, cp, cst) = (col("batch")?, col("alpha_r")?, col("sample")?, col("path")?, col("status")?);
    let mut rows = rows;
    rows.sort_by(|x, y| {
        batch_order(&(x[cb].clone(), x[ca].clone()), &(y[cb].clone(), y[ca].clone()))
            .then(x[cs].parse::<u64>().unwrap_or(u64::MAX).cmp(&y[cs].parse::<u64>().unwrap_or(u64::MAX)))
            .then(x[cs].cmp(&y[cs]))
    });

    // Per-geometry QoIs and finest boundary clouds for valid rows.
    let per: Vec<Option<(Vec<(String, Option<f64>)>, Vec<Vec3>)>> = rows
        .par_iter()
        .map(|r| -> CliResult<_> {
            if r[cst] != "ok" {
                return Ok(None);
            }
            let gdir = input.join(&r[cp]);
            let h: HexHierarchy = read_json(gdir.join("hierarchy.json"))?;
            let fine = h.finest();
            let q = geometry_qois(cfg, &gdir, fine)?;
            let cloud = fine.boundary_vertices().iter().map(|&v| fine.vertices[v]).collect();
            Ok(Some((q, cloud)))
        })
        .collect::<CliResult<_>>()?;

    let mut sample_rows = Vec::new();
    let mut qoi_names: Vec<String> = Vec::new();
    let mut groups: Vec<(BatchKey, usize, usize)> = Vec::new();
    let mut values: BTreeMap<(BatchKey, String), Vec<Option<f64>>> = BTreeMap::new();
    let mut clouds: BTreeMap<BatchKey, Vec<Vec<Vec3>>> = BTreeMap::new();
    let mut items = Vec::new();
    for (r, p) in rows.iter().zip(&per) {
        let key: BatchKey = (r[cb].clone(), r[ca].clone());
        if groups.last().is_none_or(|g| g.0 != key) {
            groups.push((key.clone(), 0, 0));
        }
        let g = groups.last_mut().unwrap();
        items.push(ItemStatus { name: r[cp].clone(), status: r[cst].clone(), reason: None });
        let Some((q, cloud)) = p else {
            g.2 += 1;
            continue;
        };
        g.1 += 1;
        for (name, v) in q {
            if !qoi_names.contains(name) {
                qoi_names.push(name.clone());
            }
            sample_rows.push(vec![r[cb].clone(), r[ca].clone(), r[cs].clone(), name.clone(), num(*v)]);
            values.entry((key.clone(), name.clone())).or_default().push(*v);
        }
        clouds.entry(key).or_default().push(cloud.clone());
    }

    let mut sum_header = header(&["batch", "alpha_r", "n_valid", "n_excluded"]);
    for q in &qoi_names {
        sum_header.extend([format!("{q}_mean"), format!("{q}_std"), format!("{q}_n")]);
    }
    let mut sum_rows = Vec::new();
    let mut stat_rows = Vec::new();
    for (key, n_ok, n_ex) in &groups {
        let mut row = vec![key.0.clone(), key.1.clone(), n_ok.to_string(), n_ex.to_string()];
        for q in &qoi_names {
            let defined: Vec<f64> = values.get(&(key.clone(), q.clone())).map(|v| v.iter().flatten().copied().collect()).unwrap_or_default();
            match monte_carlo_estimate(&defined) {
                Ok(e) => row.extend([num(Some(e.mean)), num(e.std), e.n.to_string()]),
                Err(_) => row.extend([String::new(), String::new(), "0".into()]),
            }
        }
        sum_rows.push(row);
        let batch = clouds.get(key).map(Vec::as_slice).unwrap_or_default();
        let mut srow = vec![key.0.clone(), key.1.clone(), batch.len().to_string()];
        match batch_shape_stats(batch) {
            Ok(s) => srow.extend([num(Some(s.mean_chamfer)), num(Some(s.mean_chamfer_squared)), num(s.vertex_std)]),
            Err(_) => srow.extend([String::new(), String::new(), String::new()]),
        }
        stat_rows.push(srow);
    }

    fs::create_dir_all(&dir)?;
    write_table(&dir.join("qoi_samples.csv"), &header(&["batch", "alpha_r", "sample", "qoi", "value"]), &sample_rows)?;
    write_table(&dir.join("qoi_summary.csv"), &sum_header, &sum_rows)?;
    write_table(
        &dir.join("batch_stats.csv"),
        &header(&["batch", "alpha_r", "n_shapes", "mean_chamfer", "mean_chamfer_squared", "vertex_std"]),
        &stat_rows,
    )?;
    if let Some(reference) = &a.reference {
        let ours = read_qoi_samples(&dir.join("qoi_samples.csv"))?;
        let theirs = read_qoi_samples(&reference.join("qoi_samples.csv"))?;
        let mut keys: Vec<_> = ours.keys().filter(|k| theirs.contains_key(*k)).cloned().collect();
        keys.sort_by(|x, y| batch_order(&(x.0.clone(), x.1.clone()), &(y.0.clone(), y.1.clone())).then(x.2.cmp(&y.2)));
        let w_rows: Vec<Vec<String>> = keys
            .iter()
            .map(|k| {
                let (x, y) = (&ours[k], &theirs[k]);
                vec![k.0.clone(), k.1.clone(), k.2.clone(), x.len().to_string(), y.len().to_string(), num(wasserstein1(x, y).ok())]
            })
            .collect();
        write_table(&dir.join("w1.csv"), &header(&["batch", "alpha_r", "qoi", "n", "n_reference", "w1"]), &w_rows)?;
    }
    write_manifest(&dir, "analyze", cfg, &items)
}

/// register → train → sample → extend → analyze.
pub fn run_all(cfg: &LoadedConfig, force: bool) -> CliResult<()> {
    cmd_register(cfg, force)?;
    cmd_train(cfg, force)?;
    if cfg.config.sampling.checkpoint == Checkpoint::Finetune {
        cmd_finetune(cfg, force)?;
    }
    cmd_sample(cfg, &SampleOverrides::default(), force)?;
    cmd_extend(cfg, force)?;
    cmd_analyze(cfg, force)
}

/// Parses a document from a string, for tests and tools.
pub fn parse_doc<T: Document>(text: &str) -> CliResult<T> {
    Ok(from_json_str(text)?)
}

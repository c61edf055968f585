//! A small synthetic project: a cube template and scaled-box targets, with a
//! configuration sized for a run of a few minutes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeflow::interpolant::{DriftNetConfig, TrainingConfig};
use shapeflow::mesh::generate::box_hex_mesh;
use shapeflow::mesh::io::{write_json, write_obj};
use shapeflow::mesh::{CenterlineEncoding, HexHierarchy, SurfaceMesh, Vec3};
use shapeflow::registration::{Level, RegistrationConfig};

use crate::config::PipelineConfig;
use crate::{CliResult, Template};

/// Two-level hierarchy over `[-1, 1]³` (4³ cells on the finest level).
pub fn toy_template() -> HexHierarchy {
    HexHierarchy::from_base(box_hex_mesh([2; 3], Vec3::repeat(-1.0), Vec3::repeat(1.0)), 2)
}

/// Three-point centerline along x encoding the half-axes of a box.
pub fn box_condition(axes: &Vec3) -> CenterlineEncoding {
    CenterlineEncoding {
        points: vec![Vec3::new(-axes.x, 0.0, 0.0), Vec3::zeros(), Vec3::new(axes.x, 0.0, 0.0)],
        radii: vec![axes.y, 0.5 * (axes.y + axes.z), axes.z],
    }
}

pub fn toy_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig { seed, ..PipelineConfig::default() };
    c.registration = RegistrationConfig {
        n_steps: 4,
        hidden: vec![16],
        lr: 1e-2,
        levels: vec![Level { fraction: 1.0, until_epoch: 150 }],
        ..RegistrationConfig::default()
    };
    c.drift = DriftNetConfig { n_f: 3, n_cntrl: 3, head_width: 16, trunk: vec![16], k: 6, ..DriftNetConfig::default() };
    c.training = TrainingConfig { epochs: 60, finetune_epochs: 20, lr: 1e-3, ..TrainingConfig::default() };
    c.sampling.n_perturbations = 2;
    c.sampling.n_samples = 4;
    c.sampling.time_steps = 10;
    c.sampling.alpha_r = vec![0.9, 1.0];
    c.sampling.gauss_amplitude = 0.02;
    c.transport.elastic.n_steps = 4;
    c.apply_seed();
    c
}

/// Writes `template.json`, `shapes/` with `n_shapes` boxes whose half-axes
/// are drawn from U[0.8, 1.25], and `config.toml` into `dir`. Returns the
/// configuration path.
pub fn make_toy(dir: &Path, n_shapes: usize, seed: u64) -> CliResult<PathBuf> {
    let shapes = dir.join("shapes");
    fs::create_dir_all(&shapes)?;
    let h = toy_template();
    write_json(dir.join("template.json"), &h)?;
    let surface = Template::new(h).surface;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_shapes {
        let axes = Vec3::from_fn(|_, _| rng.random_range(0.8..1.25));
        let target = SurfaceMesh { vertices: surface.vertices.iter().map(|p| p.component_mul(&axes)).collect(), ..surface.clone() };
        write_obj(shapes.join(format!("box_{i:02}.obj")), &target)?;
        write_json(shapes.join(format!("box_{i:02}.centerline.json")), &box_condition(&axes))?;
    }
    let path = dir.join("config.toml");
    fs::write(&path, toy_config(seed).dump())?;
    Ok(path)
}

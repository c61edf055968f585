//! Pipeline orchestration for shapeflow: registration, drift training,
//! sampling, volume extension and analysis, each writing CSV tables and a
//! reproducibility manifest under the output root.

pub mod config;
pub mod pipeline;
pub mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shapeflow::mesh::io::read_json;
use shapeflow::mesh::{HexHierarchy, SurfaceMesh};

pub use config::{LoadedConfig, PipelineConfig};
pub use pipeline::{cmd_analyze, cmd_extend, cmd_finetune, cmd_register, cmd_sample, cmd_train, run_all, SampleOverrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] shapeflow::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reproducibility record written into every output directory.
#[derive(Serialize)]
pub struct Manifest<'a, R: Serialize> {
    pub schema: &'static str,
    pub command: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub version: &'static str,
    pub items: &'a [R],
}

pub fn write_manifest<R: Serialize>(dir: &Path, command: &str, cfg: &LoadedConfig, items: &[R]) -> CliResult<()> {
    let m = Manifest {
        schema: "manifest-v1",
        command,
        config_hash: &cfg.hash,
        seed: cfg.config.seed,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
        items,
    };
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    pipeline::write_if_changed(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(())
}

/// The hex template and its finest boundary as a compact surface whose
/// vertex `i` is hex vertex `boundary[i]`.
pub struct Template {
    pub hierarchy: HexHierarchy,
    pub boundary: Vec<usize>,
    pub surface: SurfaceMesh,
}

impl Template {
    pub fn load(path: &Path) -> CliResult<Self> {
        Ok(Self::new(read_json(path)?))
    }

    pub fn new(hierarchy: HexHierarchy) -> Self {
        let fine = hierarchy.finest();
        let boundary = fine.boundary_vertices();
        let mut index = vec![usize::MAX; fine.vertices.len()];
        for (i, &v) in boundary.iter().enumerate() {
            index[v] = i;
        }
        let full = fine.boundary_surface();
        let surface = SurfaceMesh {
            vertices: boundary.iter().map(|&v| fine.vertices[v]).collect(),
            triangles: full.triangles.iter().map(|t| t.map(|v| index[v])).collect(),
            patches: full.patches,
            normals: None,
        };
        Template { hierarchy, boundary, surface }
    }
}

/// `(stem, path)` of the files in `dir` named `<stem><suffix>`, by stem.
pub fn list_files(dir: &Path, suffix: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix(suffix) {
            if !stem.is_empty() && path.is_file() {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Runs `f` on a dedicated pool with the configured thread count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

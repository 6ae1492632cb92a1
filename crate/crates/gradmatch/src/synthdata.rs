//! Deterministic synthetic data generation, splitting, and bootstrap
//! resampling, plus ingestion of IDX-format image files.
//!
//! Generators are pure functions of their seed: the same seed produces a
//! bit-identical dataset regardless of call order or threading, because each
//! generator consumes a dedicated [`RngStream`]. Draw order within a
//! generator is fixed and documented on each function so tests can pin exact
//! datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numkernel::Matrix;
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("idx parse error at byte {offset}: {reason}")]
    IdxParse { offset: usize, reason: String },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A supervised dataset: inputs `x` (n x d), targets `y` (n x k), and a
/// provenance tag recording generator and seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub id: String,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    /// Copies the given rows into a new dataset (used for batches and splits).
    pub fn subset(&self, rows: &[usize], id: String) -> Dataset {
        let mut x = Matrix::zeros(rows.len(), self.x.cols());
        let mut y = Matrix::zeros(rows.len(), self.y.cols());
        for (new_r, &r) in rows.iter().enumerate() {
            for c in 0..self.x.cols() {
                x.set(new_r, c, self.x.get(r, c));
            }
            for c in 0..self.y.cols() {
                y.set(new_r, c, self.y.get(r, c));
            }
        }
        Dataset { x, y, id }
    }
}

/// Configuration for the noisy linear generator `y = X theta + eps`.
#[derive(Clone, Debug)]
pub struct LinearGenConfig {
    pub n: usize,
    pub d: usize,
    pub coef_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Draws `y = X theta + eps` with `X_ij ~ N(0,1)`, `theta_i ~ N(0, coef_std^2)`
/// and `eps_i ~ N(0, noise_std^2)`.
///
/// Draw order: X row-major, then theta, then eps, all from the stream
/// `(seed, "gen_linear")`.
pub fn gen_linear(cfg: &LinearGenConfig) -> Result<(Dataset, Vec<f64>), DataError> {
    if cfg.n == 0 || cfg.d == 0 {
        return Err(DataError::Config(format!(
            "gen_linear requires n >= 1 and d >= 1 (got n={}, d={})",
            cfg.n, cfg.d
        )));
    }
    if cfg.coef_std < 0.0 || cfg.noise_std < 0.0 {
        return Err(DataError::Config(
            "gen_linear requires nonnegative standard deviations".into(),
        ));
    }
    let mut rng = RngStream::new(cfg.seed, "gen_linear");
    let x = Matrix::from_vec(cfg.n, cfg.d, rng.normal_vec(cfg.n * cfg.d));
    let theta: Vec<f64> = (0..cfg.d).map(|_| rng.normal_scaled(cfg.coef_std)).collect();
    let mut y = Matrix::zeros(cfg.n, 1);
    let xtheta = x.matvec(&theta);
    for i in 0..cfg.n {
        y.set(i, 0, xtheta[i] + rng.normal_scaled(cfg.noise_std));
    }
    let id = format!(
        "linear(seed={},n={},d={},coef_std={},noise_std={})",
        cfg.seed, cfg.n, cfg.d, cfg.coef_std, cfg.noise_std
    );
    Ok((Dataset { x, y, id }, theta))
}

/// Gaussian clusters with unit covariance and one-hot targets. Class means sit
/// on a regular simplex at pairwise distance `separation` (axis construction,
/// so `d >= classes` is required). Classes are balanced up to remainder, with
/// rows emitted class-block by class-block.
pub fn gen_blobs(
    n: usize,
    d: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::Config(format!(
            "gen_blobs requires classes >= 2 (got {classes})"
        )));
    }
    if n < classes {
        return Err(DataError::Config(format!(
            "gen_blobs requires n >= classes (got n={n}, classes={classes})"
        )));
    }
    if d < classes {
        return Err(DataError::Config(format!(
            "gen_blobs axis-simplex construction requires d >= classes (got d={d}, classes={classes})"
        )));
    }
    // Means c * (e_k - centroid): pairwise distance |e_i - e_j| * c = sqrt(2) c.
    let scale = separation / std::f64::consts::SQRT_2;
    let centroid = 1.0 / classes as f64;
    let mut rng = RngStream::new(seed, "gen_blobs");
    let mut x = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, classes);
    let base = n / classes;
    let remainder = n % classes;
    let mut row = 0usize;
    for k in 0..classes {
        let count = base + usize::from(k < remainder);
        for _ in 0..count {
            for c in 0..d {
                let mean = if c < classes {
                    scale * (f64::from(u8::from(c == k)) - centroid)
                } else {
                    0.0
                };
                x.set(row, c, mean + rng.normal());
            }
            y.set(row, k, 1.0);
            row += 1;
        }
    }
    let id = format!("blobs(seed={seed},n={n},d={d},classes={classes},separation={separation})");
    Ok(Dataset { x, y, id })
}

/// Draws `n` rows uniformly with replacement. The provenance tag records the
/// parent id and resample seed. Row indices come from the stream
/// `(seed, "bootstrap")` in order.
pub fn resample_bootstrap(data: &Dataset, seed: u64) -> Dataset {
    assert!(data.n() >= 1, "bootstrap of empty dataset");
    let mut rng = RngStream::new(seed, "bootstrap");
    let rows: Vec<usize> = (0..data.n()).map(|_| rng.below(data.n())).collect();
    let id = format!("{}|boot(seed={seed})", data.id);
    data.subset(&rows, id)
}

/// Splits into disjoint (train, test) parts of sizes
/// `round(n * (1 - test_frac))` and the remainder, after a seeded permutation
/// from the stream `(seed, "split")`.
pub fn train_test_split(
    data: &Dataset,
    test_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(DataError::Config(format!(
            "test_frac must lie in [0, 1) (got {test_frac})"
        )));
    }
    let n = data.n();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, "split");
    rng.shuffle(&mut perm);
    let train_n = ((n as f64) * (1.0 - test_frac)).round() as usize;
    let train_rows = &perm[..train_n];
    let test_rows = &perm[train_n..];
    let train = data.subset(train_rows, format!("{}|train(seed={seed})", data.id));
    let test = data.subset(test_rows, format!("{}|test(seed={seed})", data.id));
    Ok((train, test))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    if offset + 4 > bytes.len() {
        return Err(DataError::IdxParse {
            offset,
            reason: format!("file truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label pair into a dataset with pixels scaled to
/// `[0, 1]` (row-major flattening) and labels one-hot encoded over
/// `max(label) + 1` classes.
pub fn idx_load(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = fs::read(images_path).map_err(|source| DataError::Io {
        path: images_path.display().to_string(),
        source,
    })?;
    let labels = fs::read(labels_path).map_err(|source| DataError::Io {
        path: labels_path.display().to_string(),
        source,
    })?;

    let magic = read_be_u32(&images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::IdxParse {
            offset: 0,
            reason: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n_images = read_be_u32(&images, 4, "image count")? as usize;
    let rows = read_be_u32(&images, 8, "image rows")? as usize;
    let cols = read_be_u32(&images, 12, "image cols")? as usize;
    let pixels = rows * cols;
    let expected = 16 + n_images * pixels;
    if images.len() < expected {
        return Err(DataError::IdxParse {
            offset: images.len(),
            reason: format!(
                "image payload truncated: expected {expected} bytes, found {}",
                images.len()
            ),
        });
    }

    let magic = read_be_u32(&labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::IdxParse {
            offset: 0,
            reason: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n_labels = read_be_u32(&labels, 4, "label count")? as usize;
    if n_labels != n_images {
        return Err(DataError::IdxParse {
            offset: 4,
            reason: format!("label count {n_labels} does not match image count {n_images}"),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(DataError::IdxParse {
            offset: labels.len(),
            reason: format!(
                "label payload truncated: expected {} bytes, found {}",
                8 + n_labels,
                labels.len()
            ),
        });
    }

    let label_bytes = &labels[8..8 + n_labels];
    let classes = label_bytes.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut x = Matrix::zeros(n_images, pixels);
    let mut y = Matrix::zeros(n_images, classes);
    for i in 0..n_images {
        let start = 16 + i * pixels;
        for p in 0..pixels {
            x.set(i, p, f64::from(images[start + p]) / 255.0);
        }
        y.set(i, label_bytes[i] as usize, 1.0);
    }
    let mut id = String::from("idx(");
    let _ = write!(id, "{}", images_path.display());
    id.push(')');
    Ok(Dataset { x, y, id })
}

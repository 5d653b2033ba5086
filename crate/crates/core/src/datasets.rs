//! Data sources: synthetic teacher-network regression problems and MNIST-style
//! IDX ingestion with per-class uniform subsampling and one-hot labels.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{predict_sample, DataBatch, NetworkShape, Params};
use crate::rng::Rng;

/// Synthetic regression problem: inputs from a fixed Gaussian with a random
/// covariance factor, targets from a random teacher network plus noise.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub shape: NetworkShape,
    pub eps_y: f64,
    pub seed: u64,
    pub teacher_scale: f64,
}

impl SyntheticSpec {
    pub fn new(shape: NetworkShape, seed: u64) -> Self {
        SyntheticSpec {
            shape,
            eps_y: 0.05,
            seed,
            teacher_scale: 1.0,
        }
    }
}

/// Draws the training batch, a test batch of ⌈N/5⌉ samples from the same
/// law, and the teacher parameters that produced the targets.
///
/// The draw order is fixed: mean ζ, covariance factor Σ₀, teacher weights
/// and biases layer by layer, then per sample the input noise followed by
/// the target noise. Everything flows from `spec.seed`, so outputs are
/// byte-identical across runs and platforms.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(DataBatch, DataBatch, Params)> {
    if spec.eps_y < 0.0 {
        return Err(CoreError::InvalidConfig {
            field: "eps_y",
            detail: "noise level must be nonnegative".into(),
        });
    }
    let shape = &spec.shape;
    let n0 = shape.dim(0);
    let n_out = shape.dim(shape.layers());
    let n_train = shape.n_samples();
    let n_test = n_train.div_ceil(5);
    let mut rng = Rng::new(spec.seed);

    let mut zeta = vec![0.0; n0];
    rng.fill_normal(&mut zeta);
    let mut sigma0 = DenseMatrix::zeros(n0, n0);
    rng.fill_normal(sigma0.entries_mut());

    let mut teacher = Params::zeros(shape);
    for (l, w) in teacher.weights.iter_mut().enumerate() {
        let fan_in = shape.dim(l) as f64;
        let scale = spec.teacher_scale / fan_in.sqrt();
        for e in w.entries_mut() {
            *e = scale * rng.next_normal();
        }
    }
    for b in &mut teacher.biases {
        for e in b.iter_mut() {
            *e = 0.1 * spec.teacher_scale * rng.next_normal();
        }
    }

    let total = n_train + n_test;
    let mut x_all = vec![0.0; n0 * total];
    let mut y_all = vec![0.0; n_out * total];
    let mut g = vec![0.0; n0];
    for s in 0..total {
        rng.fill_normal(&mut g);
        let x = &mut x_all[s * n0..(s + 1) * n0];
        // x = zeta + Sigma0^T g, so Cov(x) = Sigma0^T Sigma0
        for i in 0..n0 {
            let mut acc = zeta[i];
            for (k, gk) in g.iter().enumerate() {
                acc += sigma0[(k, i)] * gk;
            }
            x[i] = acc;
        }
        let out = predict_sample(&teacher, x, 0.01);
        let y = &mut y_all[s * n_out..(s + 1) * n_out];
        for (yi, oi) in y.iter_mut().zip(&out) {
            *yi = oi + spec.eps_y * rng.next_normal();
        }
    }

    let pack = |lo: usize, hi: usize| -> Result<DataBatch> {
        let count = hi - lo;
        let mut x = DenseMatrix::zeros(n0, count);
        let mut y = DenseMatrix::zeros(n_out, count);
        for s in lo..hi {
            for i in 0..n0 {
                x[(i, s - lo)] = x_all[s * n0 + i];
            }
            for i in 0..n_out {
                y[(i, s - lo)] = y_all[s * n_out + i];
            }
        }
        DataBatch::new(x, y)
    };
    Ok((pack(0, n_train)?, pack(n_train, total)?, teacher))
}

/// Teacher forward pass used when generating targets (α = 0.01 network).
pub fn teacher_predict(teacher: &Params, x: &[f64]) -> Vec<f64> {
    predict_sample(teacher, x, 0.01)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Paths and sampling parameters for an MNIST-format dataset.
#[derive(Debug, Clone)]
pub struct MnistSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub n_train: usize,
    pub seed: u64,
}

impl MnistSpec {
    /// Standard file names under a directory, preferring gzipped variants
    /// when both exist.
    pub fn from_dir(dir: &Path, n_train: usize, seed: u64) -> Self {
        let pick = |base: &str| {
            let gz = dir.join(format!("{base}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(base)
            }
        };
        MnistSpec {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
            n_train,
            seed,
        }
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| CoreError::Parse {
                format: "gzip",
                offset: 0,
                detail: e.to_string(),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or(CoreError::Parse {
        format: what,
        offset: offset as u64,
        detail: "file truncated".into(),
    })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Parsed IDX image file: `count` images of `rows`×`cols` bytes.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub count: usize,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "idx-images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CoreError::Parse {
            format: "idx-images",
            offset: 0,
            detail: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = be_u32(bytes, 4, "idx-images")? as usize;
    let rows = be_u32(bytes, 8, "idx-images")? as usize;
    let cols = be_u32(bytes, 12, "idx-images")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(CoreError::Parse {
            format: "idx-images",
            offset: bytes.len() as u64,
            detail: format!("need {expected} bytes for {count} {rows}x{cols} images"),
        });
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
        count,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "idx-labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CoreError::Parse {
            format: "idx-labels",
            offset: 0,
            detail: format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = be_u32(bytes, 4, "idx-labels")? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(CoreError::Parse {
            format: "idx-labels",
            offset: bytes.len() as u64,
            detail: format!("need {expected} bytes for {count} labels"),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Serializes images into the IDX format, optionally gzipped. Each image is
/// `rows`×`cols` bytes.
pub fn write_idx_images(path: &Path, images: &[u8], count: usize, rows: usize, cols: usize, gzip: bool) -> Result<()> {
    assert_eq!(images.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(images);
    write_maybe_gzip(path, &out, gzip)
}

pub fn write_idx_labels(path: &Path, labels: &[u8], gzip: bool) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_maybe_gzip(path, &out, gzip)
}

fn write_maybe_gzip(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    if gzip {
        use std::io::Write;
        let file = std::fs::File::create(path)?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

struct LabeledSet {
    images: IdxImages,
    labels: Vec<u8>,
}

fn load_labeled(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = parse_idx_images(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    if images.count != labels.len() {
        return Err(CoreError::Parse {
            format: "idx",
            offset: 4,
            detail: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    Ok(LabeledSet { images, labels })
}

/// Per-class uniform subsample without replacement: `n` total, split as
/// evenly as possible over the 10 classes (low class indices absorb the
/// remainder, so counts differ by at most one).
fn sample_per_class(labels: &[u8], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &lab) in labels.iter().enumerate() {
        if lab > 9 {
            return Err(CoreError::Parse {
                format: "idx-labels",
                offset: (8 + i) as u64,
                detail: format!("label {lab} out of range 0..=9"),
            });
        }
        by_class[lab as usize].push(i);
    }
    let base = n / 10;
    let rem = n % 10;
    let mut picked = Vec::with_capacity(n);
    for (c, pool) in by_class.iter_mut().enumerate() {
        let want = base + usize::from(c < rem);
        if pool.len() < want {
            return Err(CoreError::InvalidConfig {
                field: "n_train",
                detail: format!("class {c} has only {} samples, need {want}", pool.len()),
            });
        }
        // partial Fisher-Yates: the first `want` slots become the draw
        for i in 0..want {
            let j = i + rng.next_below(pool.len() - i);
            pool.swap(i, j);
        }
        picked.extend_from_slice(&pool[..want]);
    }
    Ok(picked)
}

fn to_batch(set: &LabeledSet, picked: &[usize]) -> Result<DataBatch> {
    let dim = set.images.rows * set.images.cols;
    let n = picked.len();
    let mut x = DenseMatrix::zeros(dim, n);
    let mut y = DenseMatrix::zeros(10, n);
    for (col, &idx) in picked.iter().enumerate() {
        let px = &set.images.pixels[idx * dim..(idx + 1) * dim];
        for (i, &p) in px.iter().enumerate() {
            x[(i, col)] = p as f64 / 255.0;
        }
        y[(set.labels[idx] as usize, col)] = 1.0;
    }
    DataBatch::new(x, y)
}

/// Loads IDX train/test files (gzip-transparent), scales pixels to [0, 1],
/// one-hot encodes the 10 classes, and draws the requested training count
/// per class uniformly without replacement; the test batch of ⌈N/5⌉ samples
/// is drawn the same way from the test files.
pub fn load_mnist(spec: &MnistSpec) -> Result<(DataBatch, DataBatch)> {
    let train = load_labeled(&spec.train_images, &spec.train_labels)?;
    let test = load_labeled(&spec.test_images, &spec.test_labels)?;
    let mut rng = Rng::new(spec.seed).derive(0x4d_4e_49_53);
    let picked_train = sample_per_class(&train.labels, spec.n_train, &mut rng)?;
    let n_test = spec.n_train.div_ceil(5);
    let picked_test = sample_per_class(&test.labels, n_test.min(test.labels.len()), &mut rng)?;
    Ok((to_batch(&train, &picked_train)?, to_batch(&test, &picked_test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sum_sq_err;

    #[test]
    fn noiseless_teacher_interpolates_its_own_data() {
        let shape = NetworkShape::new(vec![3, 4, 2], 20).unwrap();
        let mut spec = SyntheticSpec::new(shape, 7);
        spec.eps_y = 0.0;
        let (train, _test, teacher) = gen_synthetic(&spec).unwrap();
        let err = sum_sq_err(&teacher, &train, 0.01) / 20.0;
        assert!(err <= 1e-24, "train err {err}");
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let shape = NetworkShape::new(vec![2, 2, 1], 10).unwrap();
        let spec = SyntheticSpec::new(shape, 3);
        let (a_train, a_test, a_teacher) = gen_synthetic(&spec).unwrap();
        let (b_train, b_test, b_teacher) = gen_synthetic(&spec).unwrap();
        assert_eq!(a_train.x, b_train.x);
        assert_eq!(a_train.y, b_train.y);
        assert_eq!(a_test.x, b_test.x);
        assert_eq!(a_teacher, b_teacher);
        let spec2 = SyntheticSpec::new(NetworkShape::new(vec![2, 2, 1], 10).unwrap(), 4);
        let (c_train, ..) = gen_synthetic(&spec2).unwrap();
        assert_ne!(a_train.x, c_train.x);
    }

    #[test]
    fn test_split_has_ceil_n_over_five_samples() {
        let shape = NetworkShape::new(vec![2, 1], 11).unwrap();
        let spec = SyntheticSpec::new(shape, 0);
        let (train, test, _) = gen_synthetic(&spec).unwrap();
        assert_eq!(train.n_samples(), 11);
        assert_eq!(test.n_samples(), 3); // ceil(11/5)
    }

    #[test]
    fn sample_covariance_approaches_sigma0t_sigma0() {
        let n0 = 3;
        let draws = 100_000;
        let shape = NetworkShape::new(vec![n0, 1], draws).unwrap();
        let mut spec = SyntheticSpec::new(shape, 5);
        spec.eps_y = 0.0;
        // reproduce the generator's own zeta / sigma0 stream
        let mut rng = Rng::new(spec.seed);
        let mut zeta = vec![0.0; n0];
        rng.fill_normal(&mut zeta);
        let mut sigma0 = DenseMatrix::zeros(n0, n0);
        rng.fill_normal(sigma0.entries_mut());
        let (train, ..) = gen_synthetic(&spec).unwrap();
        // sample covariance
        let n = train.n_samples();
        let mut mean = vec![0.0; n0];
        for s in 0..n {
            for i in 0..n0 {
                mean[i] += train.x[(i, s)];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![vec![0.0; n0]; n0];
        for s in 0..n {
            for i in 0..n0 {
                for j in 0..n0 {
                    cov[i][j] += (train.x[(i, s)] - mean[i]) * (train.x[(j, s)] - mean[j]);
                }
            }
        }
        let mut diff_sq = 0.0;
        let mut ref_sq = 0.0;
        for i in 0..n0 {
            for j in 0..n0 {
                cov[i][j] /= (n - 1) as f64;
                let mut target = 0.0;
                for k in 0..n0 {
                    target += sigma0[(k, i)] * sigma0[(k, j)];
                }
                diff_sq += (cov[i][j] - target).powi(2);
                ref_sq += target * target;
            }
        }
        assert!(
            diff_sq.sqrt() <= 0.05 * ref_sq.sqrt(),
            "cov deviation {} vs {}",
            diff_sq.sqrt(),
            ref_sq.sqrt()
        );
    }

    fn tiny_idx_fixture(dir: &Path, gzip: bool) -> MnistSpec {
        // 40 train and 20 test images, 2x2, labels cycling 0..9
        let count = 40;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let lab = (i % 10) as u8;
            labels.push(lab);
            pixels.extend_from_slice(&[lab * 20, 255 - lab * 20, i as u8, 255]);
        }
        let suffix = if gzip { ".gz" } else { "" };
        let ti = dir.join(format!("train-images-idx3-ubyte{suffix}"));
        let tl = dir.join(format!("train-labels-idx1-ubyte{suffix}"));
        write_idx_images(&ti, &pixels, count, 2, 2, gzip).unwrap();
        write_idx_labels(&tl, &labels, gzip).unwrap();
        let test_count = 20;
        let te_i = dir.join(format!("t10k-images-idx3-ubyte{suffix}"));
        let te_l = dir.join(format!("t10k-labels-idx1-ubyte{suffix}"));
        write_idx_images(&te_i, &pixels[..test_count * 4], test_count, 2, 2, gzip).unwrap();
        write_idx_labels(&te_l, &labels[..test_count], gzip).unwrap();
        MnistSpec {
            train_images: ti,
            train_labels: tl,
            test_images: te_i,
            test_labels: te_l,
            n_train: 20,
            seed: 9,
        }
    }

    #[test]
    fn idx_round_trip_plain_and_gzip() {
        let dir = std::env::temp_dir().join(format!("idx_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for gzip in [false, true] {
            let spec = tiny_idx_fixture(&dir, gzip);
            let (train, test) = load_mnist(&spec).unwrap();
            assert_eq!(train.n_samples(), 20);
            assert_eq!(test.n_samples(), 4); // ceil(20/5)
            assert_eq!(train.x.rows(), 4);
            assert_eq!(train.y.rows(), 10);
            // pixel scaling: 255 -> 1.0, 0 -> 0.0 and one-hot columns sum to 1
            for s in 0..train.n_samples() {
                let col = train.y.col(s);
                assert_eq!(col.iter().sum::<f64>(), 1.0);
                for i in 0..4 {
                    let p = train.x[(i, s)];
                    assert!((0.0..=1.0).contains(&p));
                }
            }
            // class counts differ by at most one
            let mut counts = [0usize; 10];
            for s in 0..train.n_samples() {
                let col = train.y.col(s);
                let label = col.iter().position(|&v| v == 1.0).unwrap();
                counts[label] += 1;
            }
            let mx = counts.iter().max().unwrap();
            let mn = counts.iter().min().unwrap();
            assert!(mx - mn <= 1, "{counts:?}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let mut bytes = vec![0u8; 20];
        bytes[3] = 0x02; // wrong magic
        let err = parse_idx_images(&bytes).unwrap_err();
        match err {
            CoreError::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
        // correct magic but truncated body
        let mut ok = Vec::new();
        ok.extend_from_slice(&0x0000_0803_u32.to_be_bytes());
        ok.extend_from_slice(&2u32.to_be_bytes());
        ok.extend_from_slice(&2u32.to_be_bytes());
        ok.extend_from_slice(&2u32.to_be_bytes());
        ok.extend_from_slice(&[1, 2, 3]); // needs 8 pixel bytes
        assert!(parse_idx_images(&ok).is_err());
        // labels magic accepted
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801_u32.to_be_bytes());
        lab.extend_from_slice(&1u32.to_be_bytes());
        lab.push(7);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7]);
    }

    #[test]
    fn pixel_scaling_endpoints() {
        assert_eq!(255u8 as f64 / 255.0, 1.0);
        assert_eq!(0u8 as f64 / 255.0, 0.0);
    }

    #[test]
    fn teacher_target_noise_level_is_controlled() {
        let shape = NetworkShape::new(vec![2, 1], 4000).unwrap();
        let mut spec = SyntheticSpec::new(shape, 13);
        spec.eps_y = 0.05;
        let (train, _, teacher) = gen_synthetic(&spec).unwrap();
        let mut noise_sq = 0.0;
        for s in 0..train.n_samples() {
            let x = train.x.col(s);
            let clean = predict_sample(&teacher, &x, 0.01);
            noise_sq += (train.y[(0, s)] - clean[0]).powi(2);
        }
        let std = (noise_sq / train.n_samples() as f64).sqrt();
        assert!((std - 0.05).abs() < 0.005, "noise std {std}");
    }
}

//! Loader for the dSprites `.npz` archive (`imgs`: u8 `(N, 64, 64)`, `latents_classes`: i64 `(N, 6)`).

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use ndarray_npy::NpzReader;

use super::{FactorDataset, Pixels};
use crate::error::{Error, Result};

pub const DSPRITES_LEN: usize = 737_280;
/// Shape, scale, orientation, x, y. The constant color column is dropped.
pub const DSPRITES_FACTOR_SIZES: [usize; 5] = [3, 6, 40, 32, 32];
pub const DSPRITES_FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "position_x", "position_y"];

/// Loads the official archive and checks its published dimensions.
pub fn load_dsprites(path: &Path) -> Result<FactorDataset> {
    let ds = load_factor_archive(path, &DSPRITES_FACTOR_NAMES)?;
    if ds.len() != DSPRITES_LEN || ds.factor_sizes() != DSPRITES_FACTOR_SIZES {
        return Err(corrupt(
            path,
            format!("expected {DSPRITES_LEN} images with factor sizes {DSPRITES_FACTOR_SIZES:?}, found {} with {:?}", ds.len(), ds.factor_sizes()),
        ));
    }
    Ok(ds)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptArchive { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads any archive with the dSprites layout. Factor sizes are inferred as `max + 1`
/// per column after dropping the leading constant column.
pub fn load_factor_archive(path: &Path, names: &[&str]) -> Result<FactorDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(file).map_err(|e| corrupt(path, e.to_string()))?;
    let imgs: Array3<u8> = npz.by_name("imgs").or_else(|_| npz.by_name("imgs.npy")).map_err(|e| corrupt(path, format!("imgs: {e}")))?;
    let latents: Array2<i64> = npz
        .by_name("latents_classes")
        .or_else(|_| npz.by_name("latents_classes.npy"))
        .map_err(|e| corrupt(path, format!("latents_classes: {e}")))?;
    let (n, h, w) = imgs.dim();
    if latents.nrows() != n {
        return Err(corrupt(path, format!("{n} images but {} latent rows", latents.nrows())));
    }
    if latents.ncols() != names.len() + 1 {
        return Err(corrupt(path, format!("expected {} latent columns, found {}", names.len() + 1, latents.ncols())));
    }
    let factors_view = latents.slice_axis(Axis(1), (1..).into());
    let mut sizes = vec![0usize; names.len()];
    let mut factors = Vec::with_capacity(n * names.len());
    for row in factors_view.rows() {
        for (k, &v) in row.iter().enumerate() {
            let v = u32::try_from(v).map_err(|_| corrupt(path, format!("invalid factor value {v}")))?;
            sizes[k] = sizes[k].max(v as usize + 1);
            factors.push(v);
        }
    }
    if let Some(&bad) = imgs.iter().find(|&&p| p > 1) {
        return Err(corrupt(path, format!("pixel value {bad} is not binary")));
    }
    let data = imgs.into_raw_vec_and_offset().0;
    FactorDataset::new(
        Pixels::Bytes { data, scale: 1.0 },
        (1, h, w),
        factors,
        sizes,
        names.iter().map(|s| s.to_string()).collect(),
    )
    .map_err(|e| corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use ndarray_npy::NpzWriter;

    fn write_archive(path: &Path, sizes: &[usize], side: usize) {
        let n: usize = sizes.iter().product();
        let mut latents = Array2::<i64>::zeros((n, sizes.len() + 1));
        for i in 0..n {
            let mut rest = i;
            for (k, &s) in sizes.iter().enumerate().rev() {
                latents[[i, k + 1]] = (rest % s) as i64;
                rest /= s;
            }
        }
        let imgs = Array::from_shape_fn((n, side, side), |(i, r, c)| u8::from((i + r + c) % 3 == 0));
        let mut npz = NpzWriter::new_compressed(File::create(path).unwrap());
        npz.add_array("imgs", &imgs).unwrap();
        npz.add_array("latents_classes", &latents).unwrap();
        npz.finish().unwrap();
    }

    #[test]
    fn reads_archive_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.npz");
        write_archive(&path, &[3, 2, 4], 8);
        let ds = load_factor_archive(&path, &["a", "b", "c"]).unwrap();
        assert_eq!(ds.len(), 24);
        assert_eq!(ds.factor_sizes(), &[3, 2, 4]);
        assert!(ds.is_exhaustive());
        assert_eq!(ds.image_shape(), (1, 8, 8));
        assert_eq!(ds.pixels().get(0), 1.0);
    }

    #[test]
    fn wrong_counts_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.npz");
        write_archive(&path, &[3, 2, 2, 2, 2], 4);
        assert!(matches!(load_dsprites(&path), Err(Error::CorruptArchive { .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.npz");
        write_archive(&path, &[3, 2, 2, 2, 2], 4);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_dsprites(&path), Err(Error::CorruptArchive { .. })));
    }

    #[test]
    fn missing_key_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npz");
        let mut npz = NpzWriter::new(File::create(&path).unwrap());
        npz.add_array("imgs", &Array3::<u8>::zeros((2, 4, 4))).unwrap();
        npz.finish().unwrap();
        let err = load_dsprites(&path).unwrap_err();
        assert!(matches!(err, Error::CorruptArchive { .. }));
        assert!(err.to_string().contains("latents_classes"));
    }
}

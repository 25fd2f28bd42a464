use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 3D intensity array stored row-major (`x` slowest, `z` fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::dim(format!("volume dims {dims:?} must be positive")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("volume dims {dims:?} do not match {} values", data.len())));
        }
        Ok(Volume { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }
}

/// Zero-pads `raw` (centred) to a cube, resamples it trilinearly to
/// `side³` and min-max scales the result to `[0, 1]`.
///
/// A constant-intensity result maps to all zeros.
pub fn normalize_volume(raw: &Volume, side: usize) -> Result<Volume> {
    if side == 0 {
        return Err(Error::dim("target side must be positive"));
    }
    let n = *raw.dims.iter().max().expect("three dims");
    let cube = if raw.is_cube() {
        raw.clone()
    } else {
        let off = raw.dims.map(|d| (n - d) / 2);
        let mut data = vec![0.0; n * n * n];
        for i in 0..raw.dims[0] {
            for j in 0..raw.dims[1] {
                for k in 0..raw.dims[2] {
                    data[((i + off[0]) * n + j + off[1]) * n + k + off[2]] = raw.get(i, j, k);
                }
            }
        }
        Volume::new([n, n, n], data)?
    };

    let resampled = if n == side { cube } else { resample_trilinear(&cube, side)? };

    let (lo, hi) =
        resampled.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let data = if hi > lo {
        resampled.data.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; resampled.data.len()]
    };
    Volume::new([side; 3], data)
}

/// Corner-aligned trilinear resampling of a cube.
pub fn resample_trilinear(cube: &Volume, side: usize) -> Result<Volume> {
    if !cube.is_cube() {
        return Err(Error::dim(format!("resample expects a cube, got {:?}", cube.dims)));
    }
    let n = cube.dims[0];
    let coord = |i: usize| -> (usize, usize, f64) {
        let src = if side == 1 { (n - 1) as f64 / 2.0 } else { (i * (n - 1)) as f64 / (side - 1) as f64 };
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let axes: Vec<(usize, usize, f64)> = (0..side).map(coord).collect();
    Volume::from_fn([side; 3], |i, j, k| {
        let (x0, x1, fx) = axes[i];
        let (y0, y1, fy) = axes[j];
        let (z0, z1, fz) = axes[k];
        let lerp = |a: f64, b: f64, t: f64| (1.0 - t) * a + t * b;
        let c00 = lerp(cube.get(x0, y0, z0), cube.get(x0, y0, z1), fz);
        let c01 = lerp(cube.get(x0, y1, z0), cube.get(x0, y1, z1), fz);
        let c10 = lerp(cube.get(x1, y0, z0), cube.get(x1, y0, z1), fz);
        let c11 = lerp(cube.get(x1, y1, z0), cube.get(x1, y1, z1), fz);
        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx)
    })
}

/// Flattened non-overlapping `p³` blocks of a `S³` cube.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `[P × V]` with `P = (S/p)³`, `V = p³`.
    pub patches: Tensor,
    pub side: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn grid_side(&self) -> usize {
        self.side / self.patch_size
    }
}

pub fn patchify(volume: &Volume, patch_size: usize) -> Result<PatchGrid> {
    if !volume.is_cube() {
        return Err(Error::dim(format!("patchify expects a cube, got {:?}", volume.dims)));
    }
    let s = volume.dims[0];
    if patch_size == 0 || !s.is_multiple_of(patch_size) {
        return Err(Error::dim(format!("patch size {patch_size} does not divide side {s}")));
    }
    let g = s / patch_size;
    let v = patch_size.pow(3);
    let mut data = Vec::with_capacity(g * g * g * v);
    for bi in 0..g {
        for bj in 0..g {
            for bk in 0..g {
                for i in 0..patch_size {
                    for j in 0..patch_size {
                        let base = ((bi * patch_size + i) * s + bj * patch_size + j) * s + bk * patch_size;
                        data.extend_from_slice(&volume.data[base..base + patch_size]);
                    }
                }
            }
        }
    }
    Ok(PatchGrid { patches: Tensor::matrix(g * g * g, v, data)?, side: s, patch_size })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<Volume> {
    let (s, p) = (grid.side, grid.patch_size);
    let g = s / p;
    if grid.patches.shape() != [g * g * g, p * p * p] {
        return Err(Error::dim(format!("patch tensor {:?} inconsistent with S={s}, p={p}", grid.patches.shape())));
    }
    let src = grid.patches.data();
    let mut data = vec![0.0; s * s * s];
    let mut cursor = 0;
    for bi in 0..g {
        for bj in 0..g {
            for bk in 0..g {
                for i in 0..p {
                    for j in 0..p {
                        let base = ((bi * p + i) * s + bj * p + j) * s + bk * p;
                        data[base..base + p].copy_from_slice(&src[cursor..cursor + p]);
                        cursor += p;
                    }
                }
            }
        }
    }
    Volume::new([s; 3], data)
}

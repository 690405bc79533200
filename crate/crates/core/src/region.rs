//! Grid geometry: overlapping region crops on the input image and the
//! matching slice positions on downsampled feature maps, plus the
//! scatter-add fusion of sub-network outputs into main-network activations.
//!
//! All intervals are half-open `[start, end)`. A grid is described by the
//! number of regions per side G, the region side L, the overlap eps between
//! adjacent regions, and the input side. The closure condition
//! `G*L - (G-1)*eps = input_side` makes the last region end exactly at the
//! image border.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Regions per side (G); the grid has G*G regions.
    pub grids: usize,
    /// Region side length L in input pixels.
    pub region_side: usize,
    /// Overlap eps between adjacent regions, in input pixels.
    pub overlap: usize,
    /// Input image side length.
    pub input_side: usize,
    /// Downsampling factor between the input and the feature map that
    /// region outputs are fused into.
    pub divisor: usize,
}

/// Result of the closure check: either the grid tiles the input exactly or
/// the residual says by how many pixels it misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapCheck {
    Valid,
    Residual(i64),
}

impl OverlapCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, OverlapCheck::Valid)
    }
}

/// Checks `G*L - (G-1)*eps = input_side` and reports the residual
/// `input_side + (G-1)*eps - G*L` when it is nonzero.
pub fn validate_overlap(
    grids: usize,
    region_side: usize,
    overlap: usize,
    input_side: usize,
) -> OverlapCheck {
    let residual = input_side as i64 + (grids as i64 - 1) * overlap as i64
        - grids as i64 * region_side as i64;
    if residual == 0 {
        OverlapCheck::Valid
    } else {
        OverlapCheck::Residual(residual)
    }
}

/// 1-based region coordinates, row-major: `row` selects the vertical band,
/// `col` the horizontal one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionIndex {
    pub row: usize,
    pub col: usize,
}

impl GridSpec {
    pub fn new(
        grids: usize,
        region_side: usize,
        overlap: usize,
        input_side: usize,
        divisor: usize,
    ) -> Self {
        GridSpec {
            grids,
            region_side,
            overlap,
            input_side,
            divisor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids == 0 {
            return Err(Error::Geometry("grids must be at least 1".into()));
        }
        if self.divisor == 0 {
            return Err(Error::Geometry("divisor must be at least 1".into()));
        }
        if self.region_side == 0 || self.region_side > self.input_side {
            return Err(Error::Geometry(format!(
                "region side {} must be in [1, input side {}]",
                self.region_side, self.input_side
            )));
        }
        if self.overlap >= self.region_side {
            return Err(Error::Geometry(format!(
                "overlap {} must be smaller than region side {}",
                self.overlap, self.region_side
            )));
        }
        if let OverlapCheck::Residual(r) =
            validate_overlap(self.grids, self.region_side, self.overlap, self.input_side)
        {
            return Err(Error::Geometry(format!(
                "grid does not close: G*L - (G-1)*eps differs from input side by {r} \
                 (G={}, L={}, eps={}, input={})",
                self.grids, self.region_side, self.overlap, self.input_side
            )));
        }
        for (what, value) in [
            ("input side", self.input_side),
            ("region side", self.region_side),
            ("region stride", self.region_side - self.overlap),
        ] {
            if value % self.divisor != 0 {
                return Err(Error::Geometry(format!(
                    "{what} {value} is not divisible by divisor {}",
                    self.divisor
                )));
            }
        }
        Ok(())
    }

    /// Feature-map side this grid fuses into.
    pub fn fm_side(&self) -> usize {
        self.input_side / self.divisor
    }

    /// Region slice length on the feature map.
    pub fn slice_len(&self) -> usize {
        self.region_side / self.divisor
    }

    /// All G*G region indices in row-major order.
    pub fn region_indices(&self) -> impl Iterator<Item = RegionIndex> + '_ {
        let g = self.grids;
        (1..=g).flat_map(move |row| (1..=g).map(move |col| RegionIndex { row, col }))
    }

    /// Input-pixel row and column ranges of the region at `idx`.
    pub fn crop_bounds(&self, idx: RegionIndex) -> (Range<usize>, Range<usize>) {
        let stride = self.region_side - self.overlap;
        let row0 = (idx.row - 1) * stride;
        let col0 = (idx.col - 1) * stride;
        (
            row0..row0 + self.region_side,
            col0..col0 + self.region_side,
        )
    }

    /// Feature-map row and column ranges the region at `idx` is fused into.
    pub fn slice_bounds(&self, idx: RegionIndex) -> (Range<usize>, Range<usize>) {
        let stride = (self.region_side - self.overlap) / self.divisor;
        let len = self.slice_len();
        let row0 = (idx.row - 1) * stride;
        let col0 = (idx.col - 1) * stride;
        (row0..row0 + len, col0..col0 + len)
    }
}

/// Cuts the image into G*G region crops, row-major. The image must be
/// `[C, input_side, input_side]`.
pub fn crop_regions(image: &Tensor, spec: &GridSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != spec.input_side || shape[2] != spec.input_side {
        return Err(Error::Shape(format!(
            "crop_regions: image must be [C, {0}, {0}], got {1:?}",
            spec.input_side, shape
        )));
    }
    let (c, side, l) = (shape[0], spec.input_side, spec.region_side);
    let mut crops = Vec::with_capacity(spec.grids * spec.grids);
    for idx in spec.region_indices() {
        let (rows, cols) = spec.crop_bounds(idx);
        let mut crop = Tensor::zeros(&[c, l, l]);
        for ch in 0..c {
            for (yo, y) in rows.clone().enumerate() {
                let src = &image.data()[(ch * side + y) * side + cols.start
                    ..(ch * side + y) * side + cols.end];
                let dst = &mut crop.data_mut()[(ch * l + yo) * l..(ch * l + yo) * l + l];
                dst.copy_from_slice(src);
            }
        }
        crops.push(crop);
    }
    Ok(crops)
}

/// Precomputed slice positions for fusing G*G region outputs into a
/// feature map of side `fm_side`.
#[derive(Debug, Clone)]
pub struct FusionPlan {
    pub spec: GridSpec,
    pub fm_side: usize,
    pub slice_len: usize,
}

pub fn build_fusion_plan(spec: &GridSpec) -> Result<FusionPlan> {
    spec.validate()?;
    Ok(FusionPlan {
        spec: *spec,
        fm_side: spec.fm_side(),
        slice_len: spec.slice_len(),
    })
}

impl FusionPlan {
    fn check_inputs(&self, main: &Tensor, subs: &[Tensor]) -> Result<usize> {
        let shape = main.shape();
        if shape.len() != 3 || shape[1] != self.fm_side || shape[2] != self.fm_side {
            return Err(Error::Shape(format!(
                "fuse: main feature map must be [C, {0}, {0}], got {1:?}",
                self.fm_side, shape
            )));
        }
        let want = self.spec.grids * self.spec.grids;
        if subs.len() != want {
            return Err(Error::Shape(format!(
                "fuse: expected {want} region outputs, got {}",
                subs.len()
            )));
        }
        let c = shape[0];
        for (r, sub) in subs.iter().enumerate() {
            if sub.shape() != [c, self.slice_len, self.slice_len] {
                return Err(Error::Shape(format!(
                    "fuse: region output {r} must be [{c}, {0}, {0}], got {1:?}",
                    self.slice_len,
                    sub.shape()
                )));
            }
        }
        Ok(c)
    }

    /// Element-wise scatter-add of each region output into its slice of the
    /// main feature map. Overlapping cells receive the sum of all
    /// contributions.
    pub fn fuse(&self, main: &Tensor, subs: &[Tensor]) -> Result<Tensor> {
        let c = self.check_inputs(main, subs)?;
        let mut out = main.clone();
        let (f, l) = (self.fm_side, self.slice_len);
        for (sub, idx) in subs.iter().zip(self.spec.region_indices()) {
            let (rows, cols) = self.spec.slice_bounds(idx);
            for ch in 0..c {
                for (yo, y) in rows.clone().enumerate() {
                    let dst = &mut out.data_mut()
                        [(ch * f + y) * f + cols.start..(ch * f + y) * f + cols.end];
                    let src = &sub.data()[(ch * l + yo) * l..(ch * l + yo) * l + l];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of `fuse`: the main branch passes the upstream gradient
    /// through unchanged, and each region output receives the gathered
    /// slice it was added into.
    pub fn fuse_backward(&self, upstream: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let shape = upstream.shape();
        if shape.len() != 3 || shape[1] != self.fm_side || shape[2] != self.fm_side {
            return Err(Error::Shape(format!(
                "fuse backward: upstream must be [C, {0}, {0}], got {1:?}",
                self.fm_side, shape
            )));
        }
        let c = shape[0];
        let (f, l) = (self.fm_side, self.slice_len);
        let grad_main = upstream.clone();
        let mut grad_subs = Vec::with_capacity(self.spec.grids * self.spec.grids);
        for idx in self.spec.region_indices() {
            let (rows, cols) = self.spec.slice_bounds(idx);
            let mut g = Tensor::zeros(&[c, l, l]);
            for ch in 0..c {
                for (yo, y) in rows.clone().enumerate() {
                    let src = &upstream.data()
                        [(ch * f + y) * f + cols.start..(ch * f + y) * f + cols.end];
                    let dst = &mut g.data_mut()[(ch * l + yo) * l..(ch * l + yo) * l + l];
                    dst.copy_from_slice(src);
                }
            }
            grad_subs.push(g);
        }
        Ok((grad_main, grad_subs))
    }
}

//! Binary morphology with rectangular structuring elements, an exact Euclidean
//! distance transform, connected components and region boundaries.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster};
use crate::scalar::Scalar;

/// All-ones rectangle anchored at its center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    height: usize,
    width: usize,
}

impl StructuringElement {
    pub fn rect(height: usize, width: usize) -> Result<Self> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "structuring element must have odd dimensions, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::rect(size, size)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Pixel adjacency for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            _ => Err(Error::InvalidParameter(format!(
                "connectivity must be 4 or 8, got {n}"
            ))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Pixel is set iff any pixel under the centered footprint is set.
pub fn dilate(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let (h, w) = mask.dims();
    let horiz = sweep_rows(mask.values(), h, w, se.width / 2, Reduce::Any);
    let both = sweep_cols(&horiz, h, w, se.height / 2, Reduce::Any);
    BinaryMask::new(h, w, both).expect("dilation preserves shape")
}

/// Pixel is set iff every pixel under the centered footprint is set; pixels
/// outside the image count as unset.
pub fn erode(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    let (h, w) = mask.dims();
    let horiz = sweep_rows(mask.values(), h, w, se.width / 2, Reduce::All);
    let both = sweep_cols(&horiz, h, w, se.height / 2, Reduce::All);
    BinaryMask::new(h, w, both).expect("erosion preserves shape")
}

#[derive(Clone, Copy)]
enum Reduce {
    Any,
    All,
}

impl Reduce {
    /// `ones` set pixels counted in a window of `span` pixels, all of which must lie in bounds for `All`.
    #[inline]
    fn decide(self, ones: usize, span: usize, full: usize) -> u8 {
        match self {
            Reduce::Any => (ones > 0) as u8,
            Reduce::All => (span == full && ones == full) as u8,
        }
    }
}

fn sweep_rows(src: &[u8], h: usize, w: usize, radius: usize, reduce: Reduce) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    let full = 2 * radius + 1;
    let mut prefix = vec![0usize; w + 1];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        for c in 0..w {
            prefix[c + 1] = prefix[c] + row[c] as usize;
        }
        for c in 0..w {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius + 1).min(w);
            out[r * w + c] = reduce.decide(prefix[hi] - prefix[lo], hi - lo, full);
        }
    }
    out
}

fn sweep_cols(src: &[u8], h: usize, w: usize, radius: usize, reduce: Reduce) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    let full = 2 * radius + 1;
    let mut prefix = vec![0usize; h + 1];
    for c in 0..w {
        for r in 0..h {
            prefix[r + 1] = prefix[r] + src[r * w + c] as usize;
        }
        for r in 0..h {
            let lo = r.saturating_sub(radius);
            let hi = (r + radius + 1).min(h);
            out[r * w + c] = reduce.decide(prefix[hi] - prefix[lo], hi - lo, full);
        }
    }
    out
}

/// Squared Euclidean distance from every set pixel to the nearest unset pixel,
/// with the image conceptually surrounded by a ring of unset pixels.
///
/// Exact (lower-envelope-of-parabolas, separable in rows and columns).
pub fn edt_squared(mask: &BinaryMask) -> Vec<u64> {
    let (h, w) = mask.dims();
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0i64; ph * pw];
    let inf = far(ph, pw);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                grid[(r + 1) * pw + c + 1] = inf;
            }
        }
    }
    squared_transform(&mut grid, ph, pw);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(grid[(r + 1) * pw + c + 1] as u64);
        }
    }
    out
}

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `sources`, without any border ring. `None` when `sources` is empty.
pub fn distance_to_set_squared(sources: &BinaryMask) -> Option<Vec<u64>> {
    if sources.is_empty() {
        return None;
    }
    let (h, w) = sources.dims();
    let inf = far(h, w);
    let mut grid: Vec<i64> = sources
        .values()
        .iter()
        .map(|&v| if v == 1 { 0 } else { inf })
        .collect();
    squared_transform(&mut grid, h, w);
    Some(grid.into_iter().map(|d| d as u64).collect())
}

/// Finite stand-in for infinity: larger than any squared distance in an `h x w` grid.
fn far(h: usize, w: usize) -> i64 {
    ((h * h + w * w) as i64 + 1) * 4
}

fn squared_transform(grid: &mut [i64], h: usize, w: usize) {
    let n = h.max(w);
    let mut f = vec![0i64; n];
    let mut d = vec![0i64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        lower_envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
}

/// One-dimensional squared distance transform of a sampled function `f`.
fn lower_envelope(f: &[i64], d: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as i64, p as i64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) as f64 / (2 * (qf - pf)) as f64
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as i64 - v[k] as i64;
        *dq = diff * diff + f[v[k]];
    }
}

/// Euclidean distance from each set pixel to the nearest unset pixel; zero on unset pixels.
pub fn edt<T: Scalar>(mask: &BinaryMask) -> Raster<T> {
    let (h, w) = mask.dims();
    let values = edt_squared(mask)
        .into_iter()
        .map(|d2| {
            T::from_u64(d2)
                .expect("squared distance fits scalar")
                .sqrt()
        })
        .collect();
    Raster::new(h, w, values).expect("edt preserves shape")
}

/// Connected components of the set pixels.
#[derive(Debug, Clone)]
pub struct Components {
    /// Per-pixel label, 0 for background, labels start at 1 in raster-scan discovery order.
    pub labels: Vec<u32>,
    /// `sizes[label - 1]` is the pixel count of that component.
    pub sizes: Vec<usize>,
}

pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> Components {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.values()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let (r, c) = ((idx / w) as isize, (idx % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if mask.values()[n] == 1 && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Keeps only the largest connected component. Ties go to the component
/// discovered first in raster-scan order.
pub fn largest_component(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let comps = label_components(mask, connectivity);
    let (h, w) = mask.dims();
    let mut best: Option<(u32, usize)> = None;
    for (i, &size) in comps.sizes.iter().enumerate() {
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((i as u32 + 1, size));
        }
    }
    let keep = best.map_or(0, |(label, _)| label);
    let values = comps
        .labels
        .iter()
        .map(|&l| (keep != 0 && l == keep) as u8)
        .collect();
    BinaryMask::new(h, w, values).expect("component mask preserves shape")
}

/// One-pixel-wide inner boundary of a region mask, excluding the image border.
///
/// `zones AND NOT erode(zones, 3x3)`; this is the binary-exact stand-in for
/// running an edge detector on a zone mask.
pub fn extract_boundary(zones: &BinaryMask) -> BinaryMask {
    let (h, w) = zones.dims();
    let eroded = erode(zones, StructuringElement::square(3).expect("3 is odd"));
    BinaryMask::from_fn(h, w, |r, c| {
        let on_border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
        !on_border && zones.get(r, c) && !eroded.get(r, c)
    })
    .expect("boundary preserves shape")
}

//! Dense feature maps, sparse 4D tensors and match records.
//!
//! Grid coordinates are `(row, col)` throughout. A 4D site `[i, j, k, l]`
//! pairs cell `(i, j)` of image A with cell `(k, l)` of image B.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::wire::{self, WireReader};

/// Tolerance on descriptor norms accepted by [`FeatureMap::new`].
pub const NORM_TOLERANCE: f32 = 1e-4;

/// Maps a grid coordinate to a pixel coordinate using the cell-centre
/// convention `(a + 0.5) * scale - 0.5`.
pub fn grid_to_pixel(coord: f64, scale: f32) -> f64 {
    (coord + 0.5) * scale as f64 - 0.5
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit L2 norm. Zero vectors stay zero.
pub(crate) fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        let inv = 1.0 / norm;
        v.iter_mut().for_each(|x| *x *= inv);
    }
}

/// A dense `height × width` grid of `channels`-dimensional descriptors,
/// stored row-major. Every descriptor is unit-norm or all-zero (padding).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    /// Source-image pixels per grid cell, `(sy, sx)`.
    pixel_scale: [f32; 2],
}

impl FeatureMap {
    /// Builds a map from already-normalised descriptors, checking every
    /// descriptor norm against [`NORM_TOLERANCE`].
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        pixel_scale: [f32; 2],
    ) -> Result<Self> {
        let map = Self::unchecked(height, width, channels, values, pixel_scale)?;
        for (cell, d) in map.values.chunks_exact(channels).enumerate() {
            let norm = d.iter().map(|x| x * x).sum::<f32>().sqrt();
            let is_zero = d.iter().all(|&x| x == 0.0);
            if !is_zero && (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "descriptor {cell} has norm {norm}, expected 1 or an all-zero vector"
                )));
            }
        }
        Ok(map)
    }

    /// Builds a map and L2-normalises every descriptor.
    pub fn from_unnormalized(
        height: usize,
        width: usize,
        channels: usize,
        mut values: Vec<f32>,
        pixel_scale: [f32; 2],
    ) -> Result<Self> {
        if channels > 0 {
            values
                .chunks_exact_mut(channels)
                .for_each(normalize_in_place);
        }
        Self::unchecked(height, width, channels, values, pixel_scale)
    }

    fn unchecked(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        pixel_scale: [f32; 2],
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        if !pixel_scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel scale must be positive, got {pixel_scale:?}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            pixel_scale,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel_scale(&self) -> [f32; 2] {
        self.pixel_scale
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        self.cell(row * self.width + col)
    }

    /// Descriptor by linear cell index `row * width + col`.
    #[inline]
    pub fn cell(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Pixel coordinate `(y, x)` of a (possibly fractional) grid position.
    pub fn grid_to_pixel(&self, row: f64, col: f64) -> [f64; 2] {
        [
            grid_to_pixel(row, self.pixel_scale[0]),
            grid_to_pixel(col, self.pixel_scale[1]),
        ]
    }
}

/// A 4D site `[i, j, k, l]`.
pub type Site = [u32; 4];

/// Sparse 4D tensor in canonical COO form: sites strictly ascending in
/// linearised order, each carrying `channels` values.
///
/// Because every coordinate is bounded by `dims`, lexicographic order on
/// `[u32; 4]` coincides with linearised order, so sites can be binary
/// searched directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor4D {
    dims: [usize; 4],
    channels: usize,
    sites: Vec<Site>,
    values: Vec<f32>,
}

impl SparseTensor4D {
    pub fn empty(dims: [usize; 4], channels: usize) -> Self {
        Self {
            dims,
            channels,
            sites: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a tensor from unordered `(site, values)` entries.
    pub fn from_entries<I>(dims: [usize; 4], channels: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Site, Vec<f32>)>,
    {
        let mut entries: Vec<(Site, Vec<f32>)> = entries.into_iter().collect();
        entries.sort_unstable_by_key(|e| e.0);
        let mut sites = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len() * channels);
        for (site, v) in entries {
            if v.len() != channels {
                return Err(Error::Shape(format!(
                    "site {site:?} carries {} values, tensor has {channels} channels",
                    v.len()
                )));
            }
            sites.push(site);
            values.extend_from_slice(&v);
        }
        Self::from_sorted_parts(dims, channels, sites, values)
    }

    /// Builds a tensor from parts that must already be in canonical order.
    pub fn from_sorted_parts(
        dims: [usize; 4],
        channels: usize,
        sites: Vec<Site>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("tensor needs at least one channel".into()));
        }
        if values.len() != sites.len() * channels {
            return Err(Error::Shape(format!(
                "{} sites with {channels} channels need {} values, got {}",
                sites.len(),
                sites.len() * channels,
                values.len()
            )));
        }
        for (n, site) in sites.iter().enumerate() {
            if site.iter().zip(&dims).any(|(&c, &d)| c as usize >= d) {
                return Err(Error::OutOfBounds { site: *site, dims });
            }
            if n > 0 {
                match sites[n - 1].cmp(site) {
                    std::cmp::Ordering::Less => {}
                    std::cmp::Ordering::Equal => return Err(Error::DuplicateSite(*site)),
                    std::cmp::Ordering::Greater => {
                        return Err(Error::InvalidArgument(format!(
                            "sites not in canonical order at index {n}"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            dims,
            channels,
            sites,
            values,
        })
    }

    pub(crate) fn from_parts_unchecked(
        dims: [usize; 4],
        channels: usize,
        sites: Vec<Site>,
        values: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(values.len(), sites.len() * channels);
        debug_assert!(sites.windows(2).all(|w| w[0] < w[1]));
        Self {
            dims,
            channels,
            sites,
            values,
        }
    }

    /// Same site set, new per-site values.
    pub fn with_values(&self, channels: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || values.len() != self.sites.len() * channels {
            return Err(Error::Shape(format!(
                "{} sites with {channels} channels need {} values, got {}",
                self.sites.len(),
                self.sites.len() * channels,
                values.len()
            )));
        }
        Ok(Self {
            dims: self.dims,
            channels,
            sites: self.sites.clone(),
            values,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Values stored at the `idx`-th site.
    #[inline]
    pub fn value(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn find(&self, site: &Site) -> Option<usize> {
        self.sites.binary_search(site).ok()
    }

    pub fn get(&self, site: &Site) -> Option<&[f32]> {
        self.find(site).map(|idx| self.value(idx))
    }

    pub fn linear_index(&self, site: &Site) -> u64 {
        let [_, wa, hb, wb] = self.dims.map(|d| d as u64);
        let [i, j, k, l] = site.map(u64::from);
        ((i * wa + j) * hb + k) * wb + l
    }

    /// Exchanges the A and B coordinate pairs: `(i,j,k,l) -> (k,l,i,j)`.
    pub fn transpose(&self) -> Self {
        let [ha, wa, hb, wb] = self.dims;
        let mut order: Vec<(Site, u32)> = self
            .sites
            .iter()
            .enumerate()
            .map(|(n, &[i, j, k, l])| ([k, l, i, j], n as u32))
            .collect();
        order.sort_unstable_by_key(|e| e.0);
        let mut values = Vec::with_capacity(self.values.len());
        for &(_, n) in &order {
            values.extend_from_slice(self.value(n as usize));
        }
        Self::from_parts_unchecked(
            [hb, wb, ha, wa],
            self.channels,
            order.into_iter().map(|(s, _)| s).collect(),
            values,
        )
    }

    /// Union of site sets; values at shared sites are summed.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims || self.channels != other.channels {
            return Err(Error::Shape(format!(
                "cannot add tensors with dims {:?}x{} and {:?}x{}",
                self.dims, self.channels, other.dims, other.channels
            )));
        }
        let c = self.channels;
        let mut sites = Vec::with_capacity(self.len() + other.len());
        let mut values = Vec::with_capacity((self.len() + other.len()) * c);
        let (mut p, mut q) = (0, 0);
        while p < self.len() || q < other.len() {
            let ord = match (self.sites.get(p), other.sites.get(q)) {
                (Some(a), Some(b)) => a.cmp(b),
                (Some(_), None) => std::cmp::Ordering::Less,
                _ => std::cmp::Ordering::Greater,
            };
            match ord {
                std::cmp::Ordering::Less => {
                    sites.push(self.sites[p]);
                    values.extend_from_slice(self.value(p));
                    p += 1;
                }
                std::cmp::Ordering::Greater => {
                    sites.push(other.sites[q]);
                    values.extend_from_slice(other.value(q));
                    q += 1;
                }
                std::cmp::Ordering::Equal => {
                    sites.push(self.sites[p]);
                    values.extend(self.value(p).iter().zip(other.value(q)).map(|(a, b)| a + b));
                    p += 1;
                    q += 1;
                }
            }
        }
        Ok(Self::from_parts_unchecked(self.dims, c, sites, values))
    }

    /// Bytes held by site coordinates and values.
    pub fn heap_bytes(&self) -> usize {
        self.sites.len() * std::mem::size_of::<Site>() + self.values.len() * 4
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        wire::put_u32(&mut out, TENSOR_VERSION)?;
        for d in self.dims {
            wire::put_u32(&mut out, dim_u32(d)?)?;
        }
        wire::put_u32(&mut out, dim_u32(self.channels)?)?;
        wire::put_u64(&mut out, self.sites.len() as u64)?;
        for (n, site) in self.sites.iter().enumerate() {
            for &c in site {
                wire::put_u32(&mut out, c)?;
            }
            for &v in self.value(n) {
                wire::put_f32(&mut out, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut rd = WireReader::new(input);
        rd.expect_magic(*TENSOR_MAGIC)?;
        let version = rd.u32("version")?;
        if version != TENSOR_VERSION {
            return Err(Error::BadVersion(version));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = rd.u32("dims")? as usize;
        }
        let channels = rd.u32("channels")? as usize;
        let count = rd.u64("site count")? as usize;
        let mut sites = Vec::new();
        let mut values = Vec::new();
        for n in 0..count {
            let mut site = [0u32; 4];
            for c in &mut site {
                *c = rd.u32("site coordinate")?;
            }
            sites.push(site);
            for _ in 0..channels {
                let v = rd.f32("site value")?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(n));
                }
                values.push(v);
            }
        }
        Self::from_sorted_parts(dims, channels, sites, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"SNC4";
const TENSOR_VERSION: u32 = 1;

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))
}

/// `t` with A and B coordinates exchanged.
pub fn transpose4d(t: &SparseTensor4D) -> SparseTensor4D {
    t.transpose()
}

/// Elementwise sum over the union of both site sets.
pub fn add_sparse(x: &SparseTensor4D, y: &SparseTensor4D) -> Result<SparseTensor4D> {
    x.add(y)
}

/// A correspondence between grid cell `a` of image A and `b` of image B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: [u32; 2],
    pub b: [u32; 2],
    pub score: f32,
}

impl Match {
    pub fn site(&self) -> Site {
        [self.a[0], self.a[1], self.b[0], self.b[1]]
    }

    /// The same correspondence seen from the other image.
    pub fn swapped(&self) -> Self {
        Self {
            a: self.b,
            b: self.a,
            score: self.score,
        }
    }
}

/// A match in the doubled-resolution grid, with fractional coordinates and
/// the corresponding source-image pixel positions `(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinedMatch {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub score: f32,
    pub pixel_a: [f64; 2],
    pub pixel_b: [f64; 2],
}

impl RefinedMatch {
    pub fn swapped(&self) -> Self {
        Self {
            a: self.b,
            b: self.a,
            score: self.score,
            pixel_a: self.pixel_b,
            pixel_b: self.pixel_a,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(dims: [usize; 4], site: Site, v: f32) -> SparseTensor4D {
        SparseTensor4D::from_entries(dims, 1, [(site, vec![v])]).unwrap()
    }

    #[test]
    fn transpose_moves_site() {
        let t = single([2, 2, 3, 3], [0, 0, 1, 2], 0.5);
        let tt = transpose4d(&t);
        assert_eq!(tt.dims(), [3, 3, 2, 2]);
        assert_eq!(tt.sites(), &[[1, 2, 0, 0]]);
        assert_eq!(tt.values(), &[0.5]);
    }

    #[test]
    fn symmetric_tensor_is_transpose_fixed_point() {
        let t = SparseTensor4D::from_entries(
            [3, 3, 3, 3],
            1,
            [
                ([0, 1, 2, 2], vec![0.25]),
                ([2, 2, 0, 1], vec![0.25]),
                ([1, 1, 1, 1], vec![-1.0]),
            ],
        )
        .unwrap();
        assert_eq!(transpose4d(&t), t);
    }

    #[test]
    fn add_overlap_and_disjoint() {
        let dims = [2, 2, 2, 2];
        let a = single(dims, [0, 0, 0, 0], 1.0);
        let b = single(dims, [0, 0, 0, 0], 0.5);
        assert_eq!(add_sparse(&a, &b).unwrap().values(), &[1.5]);

        let c = single(dims, [1, 1, 1, 1], 2.0);
        let sum = add_sparse(&a, &c).unwrap();
        assert_eq!(sum.sites(), &[[0, 0, 0, 0], [1, 1, 1, 1]]);
        assert_eq!(sum.values(), &[1.0, 2.0]);

        let empty = SparseTensor4D::empty(dims, 1);
        assert_eq!(add_sparse(&a, &empty).unwrap(), a);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = single([2, 2, 2, 2], [0, 0, 0, 0], 1.0);
        let b = single([2, 2, 2, 3], [0, 0, 0, 0], 1.0);
        assert!(matches!(add_sparse(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_sums_stay_active() {
        let dims = [1, 1, 1, 1];
        let sum = add_sparse(&single(dims, [0; 4], 1.0), &single(dims, [0; 4], -1.0)).unwrap();
        assert_eq!(sum.len(), 1);
        assert_eq!(sum.values(), &[0.0]);
    }

    #[test]
    fn rejects_duplicates_and_out_of_bounds() {
        let dup = SparseTensor4D::from_entries(
            [2; 4],
            1,
            [([0, 0, 0, 0], vec![1.0]), ([0, 0, 0, 0], vec![2.0])],
        );
        assert!(matches!(dup, Err(Error::DuplicateSite(_))));
        let oob = SparseTensor4D::from_entries([2; 4], 1, [([0, 0, 2, 0], vec![1.0])]);
        assert!(matches!(oob, Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn linear_index_matches_lexicographic_order() {
        let t = SparseTensor4D::empty([3, 4, 5, 6], 1);
        assert_eq!(t.linear_index(&[1, 2, 3, 4]), ((4 + 2) * 5 + 3) * 6 + 4);
    }

    #[test]
    fn serialisation_rejects_bad_magic_and_truncation() {
        let t = single([2, 2, 2, 2], [1, 0, 1, 0], 3.0);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SNC4");
        assert_eq!(SparseTensor4D::read_from(&buf[..]).unwrap(), t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            SparseTensor4D::read_from(&bad[..]),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            SparseTensor4D::read_from(&buf[..buf.len() - 2]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn feature_map_checks_norms() {
        assert!(FeatureMap::new(1, 1, 2, vec![0.6, 0.8], [1.0, 1.0]).is_ok());
        assert!(FeatureMap::new(1, 1, 2, vec![0.0, 0.0], [1.0, 1.0]).is_ok());
        assert!(FeatureMap::new(1, 1, 2, vec![1.0, 1.0], [1.0, 1.0]).is_err());
        assert!(FeatureMap::new(0, 1, 2, vec![], [1.0, 1.0]).is_err());
        let f = FeatureMap::from_unnormalized(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0], [1.0, 1.0])
            .unwrap();
        assert_eq!(f.descriptor(0, 0), &[0.6, 0.8]);
        assert_eq!(f.descriptor(0, 1), &[0.0, 0.0]);
    }

    #[test]
    fn grid_to_pixel_uses_cell_centres() {
        assert_eq!(grid_to_pixel(0.0, 1.0), 0.0);
        assert_eq!(grid_to_pixel(0.0, 8.0), 3.5);
        assert_eq!(grid_to_pixel(2.0, 8.0), 19.5);
    }

    fn arb_tensor() -> impl Strategy<Value = SparseTensor4D> {
        let dims = [3usize, 4, 3, 5];
        proptest::collection::btree_map(
            (0u32..3, 0u32..4, 0u32..3, 0u32..5),
            -4.0f32..4.0,
            0..50,
        )
        .prop_map(move |m| {
            SparseTensor4D::from_entries(
                dims,
                1,
                m.into_iter().map(|((i, j, k, l), v)| ([i, j, k, l], vec![v])),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn transpose_is_an_involution(t in arb_tensor()) {
            let tt = t.transpose();
            prop_assert_eq!(tt.len(), t.len());
            let mut a: Vec<u32> = t.values().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = tt.values().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(tt.transpose(), t);
        }

        #[test]
        fn add_is_commutative_and_associative(x in arb_tensor(), y in arb_tensor(), z in arb_tensor()) {
            prop_assert_eq!(x.add(&y).unwrap(), y.add(&x).unwrap());
            let left = x.add(&y).unwrap().add(&z).unwrap();
            let right = x.add(&y.add(&z).unwrap()).unwrap();
            prop_assert_eq!(left.sites(), right.sites());
            for (a, b) in left.values().iter().zip(right.values()) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn canonical_form_is_order_independent(t in arb_tensor(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut entries: Vec<(Site, Vec<f32>)> = t
                .sites()
                .iter()
                .enumerate()
                .map(|(n, s)| (*s, t.value(n).to_vec()))
                .collect();
            entries.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rebuilt = SparseTensor4D::from_entries(t.dims(), 1, entries).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            t.write_to(&mut a).unwrap();
            rebuilt.write_to(&mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

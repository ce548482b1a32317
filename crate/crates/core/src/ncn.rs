//! Submanifold sparse 4D convolutions with 3⁴ kernels, the filtering
//! network built from them, its image-order-invariant wrapper, and a small
//! dense 4D convolution used as a reference.
//!
//! Kernel weights are stored offset-major: for each of the 81 offsets
//! (ordered by the linearised `(δi+1, δj+1, δk+1, δl+1)`), a `c_in × c_out`
//! block with `c_out` contiguous.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Site, SparseTensor4D};
use crate::wire::{self, WireReader};

/// Number of offsets in a 3⁴ kernel.
pub const KERNEL_VOLUME: usize = 81;
/// Index of the zero offset.
pub const CENTER_OFFSET: usize = 40;
/// Largest per-axis extent [`dense_conv4d`] accepts.
pub const DENSE_ORACLE_MAX_DIM: usize = 16;

const WEIGHTS_MAGIC: &[u8; 4] = b"SNCW";
const WEIGHTS_VERSION: u32 = 1;
const SITES_PER_TASK: usize = 512;

/// `(δi, δj, δk, δl)` of kernel offset `n`.
pub fn kernel_offset(n: usize) -> [i32; 4] {
    debug_assert!(n < KERNEL_VOLUME);
    [n / 27, (n / 9) % 3, (n / 3) % 3, n % 3].map(|d| d as i32 - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Self::Identity => 0,
            Self::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Identity),
            1 => Ok(Self::Relu),
            other => Err(Error::Parse(format!("unknown activation code {other}"))),
        }
    }

    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Self::Identity => v,
            Self::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    c_in: usize,
    c_out: usize,
    activation: Activation,
    kernel: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        activation: Activation,
        kernel: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Shape(format!(
                "layer channels must be positive, got {c_in}->{c_out}"
            )));
        }
        if kernel.len() != KERNEL_VOLUME * c_in * c_out || bias.len() != c_out {
            return Err(Error::Shape(format!(
                "layer {c_in}->{c_out} needs {} kernel and {c_out} bias values, got {} and {}",
                KERNEL_VOLUME * c_in * c_out,
                kernel.len(),
                bias.len()
            )));
        }
        if let Some(idx) = kernel.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self {
            c_in,
            c_out,
            activation,
            kernel,
            bias,
        })
    }

    /// Single-channel layer whose only non-zero weight is 1 at the zero offset.
    pub fn delta() -> Self {
        let mut kernel = vec![0.0; KERNEL_VOLUME];
        kernel[CENTER_OFFSET] = 1.0;
        Self::new(1, 1, Activation::Identity, kernel, vec![0.0]).expect("valid delta layer")
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn kernel(&self) -> &[f32] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// The `c_in × c_out` weight block for kernel offset `offset`.
    #[inline]
    pub fn weights_at(&self, offset: usize) -> &[f32] {
        let block = self.c_in * self.c_out;
        &self.kernel[offset * block..(offset + 1) * block]
    }

    /// Adds `W[offset]ᵀ · x` into `acc`.
    #[inline]
    fn accumulate(&self, offset: usize, x: &[f32], acc: &mut [f32]) {
        let w = self.weights_at(offset);
        for (ci, &xv) in x.iter().enumerate() {
            let row = &w[ci * self.c_out..(ci + 1) * self.c_out];
            acc.iter_mut().zip(row).for_each(|(a, &wv)| *a += wv * xv);
        }
    }
}

/// An ordered stack of [`ConvLayer`]s mapping one channel to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetwork {
    layers: Vec<ConvLayer>,
}

impl ConvNetwork {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Shape("network needs at least one layer".into())),
        };
        if first.c_in != 1 || last.c_out != 1 {
            return Err(Error::Shape(format!(
                "network must map 1 channel to 1, got {}->{}",
                first.c_in, last.c_out
            )));
        }
        for (n, pair) in layers.windows(2).enumerate() {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::Shape(format!(
                    "layer {n} outputs {} channels but layer {} expects {}",
                    pair[0].c_out,
                    n + 1,
                    pair[1].c_in
                )));
            }
        }
        Ok(Self { layers })
    }

    /// One δ-kernel layer: the network passes values through unchanged.
    pub fn identity() -> Self {
        Self {
            layers: vec![ConvLayer::delta()],
        }
    }

    /// Deterministic weights for the default 1→16→1 architecture
    /// (ReLU after the hidden layer, identity after the output layer).
    pub fn seeded(seed: u64) -> Self {
        Self::seeded_with_channels(seed, &[1, 16, 1])
    }

    /// Deterministic weights for an arbitrary channel chain. Weights are
    /// uniform in `±(81·c_in)^(-1/2)`, biases are zero, and every layer but
    /// the last uses ReLU.
    pub fn seeded_with_channels(seed: u64, channels: &[usize]) -> Self {
        assert!(
            channels.len() >= 2 && channels[0] == 1 && channels[channels.len() - 1] == 1,
            "channel chain must start and end at 1"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = channels.len() - 1;
        let layers = channels
            .windows(2)
            .enumerate()
            .map(|(n, pair)| {
                let (c_in, c_out) = (pair[0], pair[1]);
                let a = 1.0 / ((KERNEL_VOLUME * c_in) as f32).sqrt();
                let kernel = (0..KERNEL_VOLUME * c_in * c_out)
                    .map(|_| rng.gen_range(-a..=a))
                    .collect();
                let activation = if n + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                ConvLayer::new(c_in, c_out, activation, kernel, vec![0.0; c_out])
                    .expect("seeded layer shapes are consistent")
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Widest channel count over all layer outputs.
    pub fn max_channels(&self) -> usize {
        self.layers.iter().map(|l| l.c_out).max().unwrap_or(1)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        wire::put_u32(&mut out, WEIGHTS_VERSION)?;
        wire::put_u32(&mut out, self.layers.len() as u32)?;
        for layer in &self.layers {
            wire::put_u32(&mut out, layer.c_in as u32)?;
            wire::put_u32(&mut out, layer.c_out as u32)?;
            out.write_all(&[layer.activation.code()])?;
            for &v in layer.kernel.iter().chain(&layer.bias) {
                wire::put_f32(&mut out, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut rd = WireReader::new(input);
        rd.expect_magic(*WEIGHTS_MAGIC)?;
        let version = rd.u32("version")?;
        if version != WEIGHTS_VERSION {
            return Err(Error::BadVersion(version));
        }
        let count = rd.u32("layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let c_in = rd.u32("c_in")? as usize;
            let c_out = rd.u32("c_out")? as usize;
            let activation = Activation::from_code(rd.u8("activation")?)?;
            let kernel = rd.f32_vec(KERNEL_VOLUME * c_in * c_out, "kernel")?;
            let bias = rd.f32_vec(c_out, "bias")?;
            layers.push(ConvLayer::new(c_in, c_out, activation, kernel, bias)?);
        }
        Self::new(layers)
    }
}

pub fn save_weights(net: &ConvNetwork, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    net.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ConvNetwork> {
    ConvNetwork::read_from(BufReader::new(File::open(path)?))
}

/// `seeded_init(seed)`: the default architecture with reproducible weights.
pub fn seeded_init(seed: u64) -> ConvNetwork {
    ConvNetwork::seeded(seed)
}

/// Row pointers into a canonical site list, one block per A-cell `(i, j)`.
/// Sites of a block are sorted by `(k, l)`, so a neighbour is found by
/// binary search inside at most nine small blocks.
#[derive(Debug, Clone)]
pub struct SiteIndex {
    width_a: usize,
    starts: Vec<u32>,
}

impl SiteIndex {
    pub fn build(t: &SparseTensor4D) -> Self {
        let [ha, wa, _, _] = t.dims();
        let mut starts = vec![0u32; ha * wa + 1];
        for s in t.sites() {
            starts[s[0] as usize * wa + s[1] as usize + 1] += 1;
        }
        for n in 1..starts.len() {
            starts[n] += starts[n - 1];
        }
        Self {
            width_a: wa,
            starts,
        }
    }

    /// Site indices whose A-cell is `(i, j)`.
    #[inline]
    pub fn block(&self, i: usize, j: usize) -> std::ops::Range<usize> {
        let cell = i * self.width_a + j;
        self.starts[cell] as usize..self.starts[cell + 1] as usize
    }

    pub fn heap_bytes(&self) -> usize {
        self.starts.len() * 4
    }

    /// Calls `f(offset, neighbour)` for every active neighbour of `site`
    /// in ascending offset order (the site itself included).
    #[inline]
    fn for_each_neighbour(
        &self,
        sites: &[Site],
        dims: [usize; 4],
        site: &Site,
        mut f: impl FnMut(usize, usize),
    ) {
        let [i, j, k, l] = site.map(|c| c as i64);
        let [ha, wa, hb, wb] = dims.map(|d| d as i64);
        for di in -1..=1i64 {
            let ii = i + di;
            if ii < 0 || ii >= ha {
                continue;
            }
            for dj in -1..=1i64 {
                let jj = j + dj;
                if jj < 0 || jj >= wa {
                    continue;
                }
                let range = self.block(ii as usize, jj as usize);
                if range.is_empty() {
                    continue;
                }
                let base = range.start;
                let block = &sites[range];
                let outer = ((di + 1) * 3 + (dj + 1)) as usize * 9;
                for dk in -1..=1i64 {
                    let kk = k + dk;
                    if kk < 0 || kk >= hb {
                        continue;
                    }
                    for dl in -1..=1i64 {
                        let ll = l + dl;
                        if ll < 0 || ll >= wb {
                            continue;
                        }
                        let key = [kk as u32, ll as u32];
                        if let Ok(pos) = block.binary_search_by(|s| [s[2], s[3]].cmp(&key)) {
                            f(outer + ((dk + 1) * 3 + (dl + 1)) as usize, base + pos);
                        }
                    }
                }
            }
        }
    }
}

/// Precomputed `(offset, neighbour)` lists per site. Optional accelerator:
/// results are identical to on-the-fly lookup through [`SiteIndex`].
#[derive(Debug, Clone)]
pub struct KernelMap {
    starts: Vec<u32>,
    offsets: Vec<u8>,
    neighbours: Vec<u32>,
}

impl KernelMap {
    pub fn build(t: &SparseTensor4D) -> Self {
        let index = SiteIndex::build(t);
        let per_site: Vec<Vec<(u8, u32)>> = par::map_slice(t.sites(), |site| {
            let mut v = Vec::new();
            index.for_each_neighbour(t.sites(), t.dims(), site, |off, nb| {
                v.push((off as u8, nb as u32))
            });
            v
        });
        let mut starts = Vec::with_capacity(per_site.len() + 1);
        starts.push(0u32);
        let total: usize = per_site.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(total);
        let mut neighbours = Vec::with_capacity(total);
        for list in per_site {
            for (o, n) in list {
                offsets.push(o);
                neighbours.push(n);
            }
            starts.push(neighbours.len() as u32);
        }
        Self {
            starts,
            offsets,
            neighbours,
        }
    }

    pub fn pairs(&self) -> usize {
        self.neighbours.len()
    }

    pub fn heap_bytes(&self) -> usize {
        self.starts.len() * 4 + self.offsets.len() + self.neighbours.len() * 4
    }
}

#[derive(Clone, Copy)]
enum Lookup<'a> {
    Index(&'a SiteIndex),
    Map(&'a KernelMap),
}

/// Per-site values over a fixed site list.
#[derive(Clone, Copy)]
struct SiteValues<'a> {
    sites: &'a [Site],
    dims: [usize; 4],
    values: &'a [f32],
    channels: usize,
}

impl<'a> SiteValues<'a> {
    fn of(t: &'a SparseTensor4D) -> Self {
        Self {
            sites: t.sites(),
            dims: t.dims(),
            values: t.values(),
            channels: t.channels(),
        }
    }

    #[inline]
    fn value(&self, idx: usize) -> &'a [f32] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }
}

fn conv_values(input: SiteValues<'_>, layer: &ConvLayer, lookup: Lookup<'_>) -> Vec<f32> {
    debug_assert_eq!(input.channels, layer.c_in);
    let c_out = layer.c_out;
    let mut out = vec![0f32; input.sites.len() * c_out];
    par::for_each_chunk_mut(&mut out, SITES_PER_TASK * c_out, |task, chunk| {
        let first = task * SITES_PER_TASK;
        for (n, acc) in chunk.chunks_exact_mut(c_out).enumerate() {
            let idx = first + n;
            acc.copy_from_slice(&layer.bias);
            match lookup {
                Lookup::Index(index) => index.for_each_neighbour(
                    input.sites,
                    input.dims,
                    &input.sites[idx],
                    |off, nb| layer.accumulate(off, input.value(nb), acc),
                ),
                Lookup::Map(map) => {
                    let range = map.starts[idx] as usize..map.starts[idx + 1] as usize;
                    for (&off, &nb) in map.offsets[range.clone()].iter().zip(&map.neighbours[range])
                    {
                        layer.accumulate(off as usize, input.value(nb as usize), acc);
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
        }
    });
    out
}

fn check_channels(channels: usize, layer: &ConvLayer) -> Result<()> {
    if channels != layer.c_in {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, tensor has {channels}",
            layer.c_in,
        )));
    }
    Ok(())
}

/// One submanifold convolution: output sites equal input sites; inactive
/// and out-of-bounds neighbours contribute nothing.
pub fn submanifold_conv(input: &SparseTensor4D, layer: &ConvLayer) -> Result<SparseTensor4D> {
    check_channels(input.channels(), layer)?;
    let index = SiteIndex::build(input);
    let values = conv_values(SiteValues::of(input), layer, Lookup::Index(&index));
    input.with_values(layer.c_out, values)
}

/// [`submanifold_conv`] using a prebuilt kernel map of `input`'s sites.
pub fn submanifold_conv_mapped(
    input: &SparseTensor4D,
    layer: &ConvLayer,
    map: &KernelMap,
) -> Result<SparseTensor4D> {
    check_channels(input.channels(), layer)?;
    if map.starts.len() != input.len() + 1 {
        return Err(Error::Shape("kernel map built for a different site set".into()));
    }
    let values = conv_values(SiteValues::of(input), layer, Lookup::Map(map));
    input.with_values(layer.c_out, values)
}

/// Output values of `net` on `c`, site-major. Hidden activations are kept
/// as bare value buffers over `c`'s site list.
fn forward_values(net: &ConvNetwork, c: &SparseTensor4D, lookup: Lookup<'_>) -> Result<Vec<f32>> {
    let mut current: Option<Vec<f32>> = None;
    let mut channels = c.channels();
    for layer in &net.layers {
        check_channels(channels, layer)?;
        let view = SiteValues {
            values: current.as_deref().unwrap_or(c.values()),
            channels,
            ..SiteValues::of(c)
        };
        current = Some(conv_values(view, layer, lookup));
        channels = layer.c_out;
    }
    Ok(current.unwrap_or_else(|| c.values().to_vec()))
}

/// Applies every layer of `net` in order. The site index is built once and
/// shared by all layers since the active set never changes.
pub fn network_forward(net: &ConvNetwork, c: &SparseTensor4D) -> Result<SparseTensor4D> {
    let index = SiteIndex::build(c);
    let values = forward_values(net, c, Lookup::Index(&index))?;
    c.with_values(1, values)
}

/// [`network_forward`] through a kernel map built once for `c`.
pub fn network_forward_mapped(net: &ConvNetwork, c: &SparseTensor4D) -> Result<SparseTensor4D> {
    let map = KernelMap::build(c);
    let values = forward_values(net, c, Lookup::Map(&map))?;
    c.with_values(1, values)
}

/// `N(c) + N(cᵀ)ᵀ`: the filtered tensor is the same whichever image is
/// called A.
pub fn permutation_invariant_forward(
    net: &ConvNetwork,
    c: &SparseTensor4D,
) -> Result<SparseTensor4D> {
    let direct = forward_values(net, c, Lookup::Index(&SiteIndex::build(c)))?;
    let swapped = {
        let ct = c.transpose();
        network_forward(net, &ct)?
    }
    .transpose();
    c.with_values(1, direct)?.add(&swapped)
}

/// Dense 4D array with `channels` values per cell, layout `[i][j][k][l][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense4D {
    pub dims: [usize; 4],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Dense4D {
    pub fn zeros(dims: [usize; 4], channels: usize) -> Result<Self> {
        if dims.iter().any(|&d| d > DENSE_ORACLE_MAX_DIM) {
            return Err(Error::SizeGuard(dims));
        }
        Ok(Self {
            dims,
            channels,
            data: vec![0.0; dims.iter().product::<usize>() * channels],
        })
    }

    /// Scatters a sparse tensor; inactive cells are zero.
    pub fn from_sparse(t: &SparseTensor4D) -> Result<Self> {
        let mut d = Self::zeros(t.dims(), t.channels())?;
        for (n, site) in t.sites().iter().enumerate() {
            let at = d.offset(site.map(|c| c as usize));
            d.data[at..at + t.channels()].copy_from_slice(t.value(n));
        }
        Ok(d)
    }

    #[inline]
    pub fn offset(&self, [i, j, k, l]: [usize; 4]) -> usize {
        let [_, wa, hb, wb] = self.dims;
        (((i * wa + j) * hb + k) * wb + l) * self.channels
    }

    pub fn at(&self, pos: [usize; 4]) -> &[f32] {
        let o = self.offset(pos);
        &self.data[o..o + self.channels]
    }
}

/// Zero-padded stride-1 dense 4D convolution. Reference implementation for
/// small inputs only.
pub fn dense_conv4d(input: &Dense4D, layer: &ConvLayer) -> Result<Dense4D> {
    if input.channels != layer.c_in {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, array has {}",
            layer.c_in, input.channels
        )));
    }
    let mut out = Dense4D::zeros(input.dims, layer.c_out)?;
    let [ha, wa, hb, wb] = input.dims;
    for i in 0..ha {
        for j in 0..wa {
            for k in 0..hb {
                for l in 0..wb {
                    let pos = [i, j, k, l];
                    let mut acc = layer.bias.clone();
                    for off in 0..KERNEL_VOLUME {
                        let d = kernel_offset(off);
                        let mut nb = [0usize; 4];
                        let mut inside = true;
                        for ax in 0..4 {
                            let c = pos[ax] as i64 + d[ax] as i64;
                            if c < 0 || c >= input.dims[ax] as i64 {
                                inside = false;
                                break;
                            }
                            nb[ax] = c as usize;
                        }
                        if inside {
                            layer.accumulate(off, input.at(nb), &mut acc);
                        }
                    }
                    let o = out.offset(pos);
                    for (dst, v) in out.data[o..o + layer.c_out].iter_mut().zip(acc) {
                        *dst = layer.activation.apply(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Masks a dense array to the site set of `like` (the sparse layout the
/// network would keep after each layer).
pub fn mask_to_sites(dense: &Dense4D, like: &SparseTensor4D) -> Result<SparseTensor4D> {
    let mut values = Vec::with_capacity(like.len() * dense.channels);
    for site in like.sites() {
        values.extend_from_slice(dense.at(site.map(|c| c as usize)));
    }
    like.with_values(dense.channels, values)
}

/// Dense reference for [`network_forward`]: each layer runs densely and the
/// result is masked back to the active sites before the next layer.
pub fn dense_network_forward(net: &ConvNetwork, c: &SparseTensor4D) -> Result<SparseTensor4D> {
    let mut x = c.clone();
    for layer in &net.layers {
        let y = dense_conv4d(&Dense4D::from_sparse(&x)?, layer)?;
        x = mask_to_sites(&y, &x)?;
    }
    Ok(x)
}

//! Minimal neural-network plumbing: a named parameter store, CHW tensor
//! kernels, a reverse-mode tape over a fixed op set, and Adam.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks instantiate the identical code at `f64`.

use ndarray::{Array3, ArrayD};

pub mod adam;
pub mod graph;
pub mod kernels;

pub use adam::Adam;
pub use graph::{Graph, GradResult, Mode, NodeId};

use crate::imaging::Image;

/// Element type for all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Trainable weights get Adam updates; buffers (BatchNorm running statistics)
/// are written by the forward pass instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<T>,
}

/// Ordered collection of named parameter tensors. Registration order is the
/// canonical order for checkpoints and audits.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// Per-parameter gradients produced by [`Graph::backward`], indexed by
/// [`ParamId`]. Parameters a loss never touched stay `None`.
#[derive(Debug)]
pub struct Grads<T> {
    pub by_param: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            by_param: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param[id.0].as_ref()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: ArrayD<T>) {
        match &mut self.by_param[id.0] {
            Some(g) => *g += &grad,
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Kaiming-uniform initialization for a convolution kernel
/// `(out, in, kh, kw)`: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
/// Draws happen in `f64` so the stream is identical across scalar types.
pub fn kaiming_uniform<T: Scalar, R: rand::Rng>(
    rng: &mut R,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<T> {
    let fan_in = (in_c * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data: Vec<T> = (0..out_c * in_c * kh * kw)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(vec![out_c, in_c, kh, kw], data).expect("sized")
}

/// Conventional bias init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn bias_uniform<T: Scalar, R: rand::Rng>(
    rng: &mut R,
    out_c: usize,
    fan_in: usize,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<T> = (0..out_c)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(vec![out_c], data).expect("sized")
}

/// Convert an interleaved HWC image into a planar CHW tensor.
pub fn image_to_chw<T: Scalar>(img: &Image) -> Array3<T> {
    let (h, w, c) = img.shape();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = T::from_f64(img.get(y, x, ch));
            }
        }
    }
    out
}

/// Convert a planar CHW tensor back to an interleaved image.
/// Values are carried through unchanged; clamping is the caller's choice.
pub fn chw_to_image<T: Scalar>(arr: &Array3<T>) -> Image {
    let (c, h, w) = arr.dim();
    let mut img = Image::zeros(h, w, c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, ch, arr[[ch, y, x]].to_f64());
            }
        }
    }
    img
}

//! Integer label grids (panoptic and semantic maps) and binary masks.

use std::collections::HashSet;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Scalar;

/// Identity used for positions outside a map. Never equal to a stored id.
pub const PAD_ID: u32 = u32::MAX;

/// Instances per class in the `class * 1000 + instance` id encoding.
pub const INSTANCES_PER_CLASS: u32 = 1000;

/// Encodes a panoptic id as `class_id * 1000 + instance_index`.
///
/// Stuff classes use instance index 0.
pub fn panoptic_id(class_id: u32, instance_index: u32) -> Result<u32> {
    if instance_index >= INSTANCES_PER_CLASS {
        return Err(Error::Domain(format!(
            "instance index {instance_index} must be below {INSTANCES_PER_CLASS}"
        )));
    }
    class_id
        .checked_mul(INSTANCES_PER_CLASS)
        .and_then(|v| v.checked_add(instance_index))
        .filter(|&id| id != PAD_ID)
        .ok_or_else(|| Error::Domain(format!("class id {class_id} overflows the id range")))
}

/// Splits an id back into `(class_id, instance_index)`.
pub fn split_panoptic_id(id: u32) -> (u32, u32) {
    (id / INSTANCES_PER_CLASS, id % INSTANCES_PER_CLASS)
}

/// Row-major 2-D grid of labels.
pub trait LabelGrid: Sized {
    fn dims(&self) -> (usize, usize);
    fn labels(&self) -> &[u32];
    fn with_labels(&self, height: usize, width: usize, labels: Vec<u32>) -> Self;
}

/// Keeps the top-left sample of every `factor x factor` block.
pub fn nearest_downsample<M: LabelGrid>(map: &M, factor: usize) -> Result<M> {
    let (h, w) = map.dims();
    if factor == 0 {
        return dim_err("downsampling factor must be positive");
    }
    if h % factor != 0 || w % factor != 0 {
        return dim_err(format!(
            "{h}x{w} map is not divisible by downsampling factor {factor}"
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = map.labels();
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let row = &src[i * factor * w..];
        out.extend((0..ow).map(|j| row[j * factor]));
    }
    Ok(map.with_labels(oh, ow, out))
}

/// Per-pixel identity unifying class and instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return dim_err(format!(
                "{height}x{width} panoptic map needs {} ids, got {}",
                height * width,
                ids.len()
            ));
        }
        if let Some(pos) = ids.iter().position(|&id| id == PAD_ID) {
            return Err(Error::Domain(format!(
                "pixel ({}, {}) holds the reserved padding id",
                pos / width.max(1),
                pos % width.max(1)
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn constant(height: usize, width: usize, id: u32) -> Result<Self> {
        Self::new(height, width, vec![id; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u32) -> Result<Self> {
        let ids = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self::new(height, width, ids)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.ids[i * self.width + j]
    }

    /// Id at a possibly out-of-bounds position; outside positions read as [`PAD_ID`].
    #[inline]
    pub fn get_padded(&self, i: isize, j: isize) -> u32 {
        if i < 0 || j < 0 || i as usize >= self.height || j as usize >= self.width {
            PAD_ID
        } else {
            self.ids[i as usize * self.width + j as usize]
        }
    }

    pub fn distinct_ids(&self) -> HashSet<u32> {
        self.ids.iter().copied().collect()
    }

    /// Applies `f` to every id. The result must stay clear of [`PAD_ID`].
    pub fn relabel(&self, f: impl Fn(u32) -> u32) -> Result<Self> {
        Self::new(self.height, self.width, self.ids.iter().map(|&id| f(id)).collect())
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        nearest_downsample(self, factor)
    }
}

impl LabelGrid for PanopticMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn labels(&self) -> &[u32] {
        &self.ids
    }

    fn with_labels(&self, height: usize, width: usize, labels: Vec<u32>) -> Self {
        Self {
            height,
            width,
            ids: labels,
        }
    }
}

/// Per-pixel class indices in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    classes: Vec<u32>,
    num_classes: usize,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, classes: Vec<u32>, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return dim_err(format!(
                "{height}x{width} semantic map needs {} entries, got {}",
                height * width,
                classes.len()
            ));
        }
        if let Some(pos) = classes.iter().position(|&c| c as usize >= num_classes) {
            return Err(Error::Domain(format!(
                "class {} at pixel ({}, {}) is not below {num_classes}",
                classes[pos],
                pos / width.max(1),
                pos % width.max(1)
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            num_classes,
        })
    }

    /// Derives the semantic map of a panoptic map under the `class * 1000 + instance` encoding.
    pub fn from_panoptic(p: &PanopticMap, num_classes: usize) -> Result<Self> {
        let classes = p.ids().iter().map(|&id| split_panoptic_id(id).0).collect();
        Self::new(p.height(), p.width(), classes, num_classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.classes[i * self.width + j]
    }

    pub fn downsample(&self, factor: usize) -> Result<Self> {
        nearest_downsample(self, factor)
    }
}

impl LabelGrid for SemanticMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn labels(&self) -> &[u32] {
        &self.classes
    }

    fn with_labels(&self, height: usize, width: usize, labels: Vec<u32>) -> Self {
        Self {
            height,
            width,
            classes: labels,
            num_classes: self.num_classes,
        }
    }
}

/// Grid of exact zeros and ones.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask<T = f64> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> BinaryMask<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return dim_err(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            ));
        }
        if data.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Domain("mask values must be exactly 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(
            height,
            width,
            bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == T::one()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == T::one()).count()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v == T::one()).collect()
    }
}
